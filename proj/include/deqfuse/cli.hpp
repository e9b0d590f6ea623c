#ifndef DEQFUSE_CLI_HPP
#define DEQFUSE_CLI_HPP

namespace deqfuse::cli {

// Exit codes: 0 success, 1 validation error, 2 numeric failure
// (divergence / gradcheck fail), 3 I/O error.
constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

int run(int argc, const char* const* argv);

}  // namespace deqfuse::cli

#endif  // DEQFUSE_CLI_HPP
