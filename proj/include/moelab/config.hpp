#pragma once

#include <string>

#include "moelab/pipeline.hpp"

namespace moelab {

// Parse a `key = value` config file (# comments, blank lines allowed) over
// a default-constructed PipelineConfig. Unknown keys are a ConfigError.
PipelineConfig load_pipeline_config(const std::string& path);

// Apply one key/value pair; shared by the file parser and CLI overrides.
void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                        const std::string& value);

}  // namespace moelab
