#ifndef DEQFUSE_TRAINING_HPP
#define DEQFUSE_TRAINING_HPP

#include <string>
#include <vector>

#include "deqfuse/implicit_grad.hpp"

namespace deqfuse {

/// Single affine classification head on top of z_fuse*.
struct HeadParams {
  Tensor2 weight;  // d x C
  Tensor2 bias;    // 1 x C
};

HeadParams init_head(RngState& rng, std::size_t width, std::size_t classes);

enum class AblationVariant {
  kFull,
  kWeightedSumOnly,
  kNoDeq,
  kNoFuse,
  kNoTheta,
  kNoGate,
};

std::string variant_name(AblationVariant v);
AblationVariant variant_from_name(const std::string& name);
const std::vector<AblationVariant>& all_variants();

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Weight of the Jacobian penalty stabilizing the recurrent variants.
  double jacobian_reg_weight = 0.5;
  /// Global gradient-norm clip; 0 disables. Keeps occasional loose solves
  /// from derailing the recurrent variants.
  double max_grad_norm = 5.0;
  std::uint64_t seed = 0;
  SolverConfig solver;
  AblationVariant variant = AblationVariant::kFull;

  void validate() const;
};

/// Two modalities carrying three latent signs: an interaction pair (s1, s2)
/// split across the modalities and one bit private to modality 1. The label
/// encodes [s1 s2 > 0] and the private bit, so one modality alone caps at
/// 50% accuracy and a linear model on the concatenation caps near 50% as
/// well (the interaction bit is an XOR); the product feature resolves it.
struct SyntheticTaskSpec {
  std::size_t n_modalities = 2;
  std::size_t width = 16;
  std::size_t classes = 4;
  double sigma = 0.3;
  std::size_t n_train = 2000;
  std::size_t n_test = 1000;
};

struct Dataset {
  ModalityBundle x;
  std::vector<int> labels;
  /// Orthonormal latent directions (v1, u1, v2), exposed for test oracles.
  std::vector<Tensor2> directions;
};

struct SignProductData {
  Dataset train;
  Dataset test;
};

/// Draws train and test splits from one seeded stream (disjoint by
/// construction).
SignProductData gen_signproduct(const SyntheticTaskSpec& spec, RngState& rng);

struct CrossEntropy {
  double loss;
  Tensor2 dlogits;  // mean-reduced softmax - onehot
};

/// Log-sum-exp stabilized softmax cross entropy, mean over the batch.
CrossEntropy softmax_cross_entropy(const Tensor2& logits, const std::vector<int>& labels);

struct MetricsResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
};

MetricsResult compute_metrics(const Tensor2& logits, const std::vector<int>& labels);

struct ForwardResult {
  Tensor2 logits;
  EquilibriumState eq;
};

/// Variant-dispatched prediction: kFull/kNoGate solve the joint equilibrium,
/// kNoFuse solves the modality blocks and sums them, kNoTheta solves the fuse
/// block over z_i = x_i, kNoDeq applies one sweep, kWeightedSumOnly is
/// head(sum w_i x_i).
ForwardResult forward_predict(const ModalityBundle& x, const FusionParams& params,
                              const HeadParams& head, AblationVariant variant,
                              const SolverConfig& solver_cfg);

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
};

struct TrainResult {
  FusionParams params;
  HeadParams head;
  std::vector<EpochStats> history;
};

TrainResult train(const Dataset& train_data, const Dataset& test_data,
                  const TrainConfig& config);

}  // namespace deqfuse

#endif  // DEQFUSE_TRAINING_HPP
