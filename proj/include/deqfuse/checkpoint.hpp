#ifndef DEQFUSE_CHECKPOINT_HPP
#define DEQFUSE_CHECKPOINT_HPP

#include <string>

#include "deqfuse/training.hpp"

namespace deqfuse {

/// Versioned JSON checkpoint: dimensions, gate mode, seed provenance, and
/// every named parameter array (decimal values, bit-exact round trip).
struct Checkpoint {
  int format_version = 1;
  std::uint64_t seed = 0;
  FusionParams params;
  HeadParams head;
  bool has_head = false;
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace deqfuse

#endif  // DEQFUSE_CHECKPOINT_HPP
