#pragma once

#include <string>

#include "kpdet/config.hpp"

namespace kpdet::cli {

// Exit codes: 0 success, 2 config error, 3 missing input, 4 corrupt artifact.
enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kMissingInput = 3,
    kCorruptArtifact = 4,
};

int cmd_generate(const RunConfig& cfg, const std::string& out_dir);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint);
int cmd_bench(const RunConfig& cfg, const std::string& checkpoint);
int cmd_predict(const RunConfig& cfg, const std::string& checkpoint, double threshold,
                const std::string& out_dir);

} // namespace kpdet::cli
