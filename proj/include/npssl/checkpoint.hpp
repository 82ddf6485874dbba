#pragma once

#include <string>

#include "npssl/config.hpp"
#include "npssl/trainer.hpp"

namespace npssl {

struct LoadedCheckpoint {
    TrainerState state;
    RunConfig config;
};

// Binary snapshot of the full training state: config echo, model shape, all
// parameter/EMA/velocity tensors with shape headers, both banks' contents,
// and the step counter, closed by a content checksum. Written atomically
// (temp file + rename); round-trips bit-exactly.
void save_checkpoint(const std::string& path, const TrainerState& state, const RunConfig& config);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace npssl
