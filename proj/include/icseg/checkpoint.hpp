#pragma once

#include "icseg/training.hpp"

#include <string>

namespace icseg {

// Self-describing binary container: magic, format version, embedded config
// text, named little-endian arrays (parameters, optimizer moments, schedule
// tables, RNG state, counters), and a trailing CRC32 over everything before
// it. Version is validated before the checksum so a version flip reports as
// a version mismatch rather than corruption.
void save_checkpoint(const TrainState& st, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// Convenience for inference-only consumers.
ModelStateF load_model(const std::string& path);

}  // namespace icseg
