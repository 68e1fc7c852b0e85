#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "tulip/corpus.hpp"
#include "tulip/encoder.hpp"
#include "tulip/training.hpp"

namespace tulip {

struct GenConfig {
    std::size_t count = 0;  // 0 means "must be given on the command line"
    double long_fraction = 0.5;
    AttrOffset attr_offset = AttrOffset::mixed;
};

// Everything a pipeline run can be configured with. Defaults are the toy config.
struct RunConfig {
    std::uint64_t seed = 0;
    std::optional<std::string> phase;  // optional guard: the subcommand this file is meant for
    GenConfig gen;
    TeacherConfig teacher;             // teacher.text / teacher.image hold the model shapes
    posenc::Scheme student_scheme = posenc::Scheme::rope;
    DistillConfig distill;
    ExpandConfig expand;

    EncoderConfig student_text() const;
};

// Key/value file: one `key = value` per line, `#` starts a comment, blank lines ignored.
// Throws ParseError (with line) for malformed lines and ConfigError for unknown keys or bad values.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// Applies one setting; the same keys the file accepts.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

// Every key with its resolved value, sorted by key.
std::map<std::string, std::string> config_snapshot(const RunConfig& config);

}  // namespace tulip
