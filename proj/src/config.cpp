#include "tulip/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "tulip/error.hpp"
#include "tulip/eval.hpp"

namespace tulip {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::size_t parse_size(std::string_view key, std::string_view value) {
    const std::string s(value);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + s + "'");
    try {
        return std::stoull(s);
    } catch (const std::exception&) {
        throw ConfigError(std::string(key) + ": integer out of range '" + s + "'");
    }
}

double parse_real(std::string_view key, std::string_view value) {
    const std::string s(value);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size() && std::isfinite(v)) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string(key) + ": expected a number, got '" + s + "'");
}

bool parse_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

std::string real_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Field {
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class Member>
Field size_field(const char* key, Member member) {
    return {[key, member](RunConfig& c, std::string_view v) { member(c) = parse_size(key, v); },
            [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}

template <class Member>
Field real_field(const char* key, Member member) {
    return {[key, member](RunConfig& c, std::string_view v) { member(c) = parse_real(key, v); },
            [member](const RunConfig& c) { return real_text(member(const_cast<RunConfig&>(c))); }};
}

const std::map<std::string, Field, std::less<>>& fields() {
    static const std::map<std::string, Field, std::less<>> table = [] {
        std::map<std::string, Field, std::less<>> f;
        f["seed"] = {[](RunConfig& c, std::string_view v) { c.seed = parse_size("seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
        f["phase"] = {[](RunConfig& c, std::string_view v) {
                          static const std::vector<std::string> known = {
                              "gen", "make-teacher", "distill", "expand", "eval", "analyze-attention",
                              "analyze-relevance", "sweep", "probe"};
                          if (std::find(known.begin(), known.end(), v) == known.end())
                              throw ConfigError("phase: unknown command '" + std::string(v) + "'");
                          c.phase = std::string(v);
                      },
                      [](const RunConfig& c) { return c.phase.value_or(""); }};

        f["gen.count"] = size_field("gen.count", [](RunConfig& c) -> auto& { return c.gen.count; });
        f["gen.long_fraction"] =
            real_field("gen.long_fraction", [](RunConfig& c) -> auto& { return c.gen.long_fraction; });
        f["gen.attr_offset"] = {[](RunConfig& c, std::string_view v) { c.gen.attr_offset = parse_attr_offset(v); },
                                [](const RunConfig& c) { return std::string(to_string(c.gen.attr_offset)); }};

        f["text.vocab_size"] = size_field("text.vocab_size", [](RunConfig& c) -> auto& { return c.teacher.text.vocab_size; });
        f["text.d_model"] = size_field("text.d_model", [](RunConfig& c) -> auto& { return c.teacher.text.d_model; });
        f["text.n_heads"] = size_field("text.n_heads", [](RunConfig& c) -> auto& { return c.teacher.text.n_heads; });
        f["text.n_layers"] = size_field("text.n_layers", [](RunConfig& c) -> auto& { return c.teacher.text.n_layers; });
        f["text.mlp_ratio"] = size_field("text.mlp_ratio", [](RunConfig& c) -> auto& { return c.teacher.text.mlp_ratio; });
        f["text.max_positions"] =
            size_field("text.max_positions", [](RunConfig& c) -> auto& { return c.teacher.text.position.max_positions; });
        f["text.rope_base"] = real_field("text.rope_base", [](RunConfig& c) -> auto& { return c.teacher.text.position.rope_base; });
        f["text.cope_pmax"] = size_field("text.cope_pmax", [](RunConfig& c) -> auto& { return c.teacher.text.position.cope_pmax; });
        f["projection_dim"] = {[](RunConfig& c, std::string_view v) {
                                   c.teacher.text.projection_dim = c.teacher.image.projection_dim =
                                       parse_size("projection_dim", v);
                               },
                               [](const RunConfig& c) { return std::to_string(c.teacher.text.projection_dim); }};

        f["image.image_size"] = size_field("image.image_size", [](RunConfig& c) -> auto& { return c.teacher.image.image_size; });
        f["image.patch_size"] = size_field("image.patch_size", [](RunConfig& c) -> auto& { return c.teacher.image.patch_size; });
        f["image.d_model"] = size_field("image.d_model", [](RunConfig& c) -> auto& { return c.teacher.image.d_model; });
        f["image.n_heads"] = size_field("image.n_heads", [](RunConfig& c) -> auto& { return c.teacher.image.n_heads; });
        f["image.n_layers"] = size_field("image.n_layers", [](RunConfig& c) -> auto& { return c.teacher.image.n_layers; });
        f["image.mlp_ratio"] = size_field("image.mlp_ratio", [](RunConfig& c) -> auto& { return c.teacher.image.mlp_ratio; });

        f["teacher.epochs"] = size_field("teacher.epochs", [](RunConfig& c) -> auto& { return c.teacher.epochs; });
        f["teacher.batch_size"] = size_field("teacher.batch_size", [](RunConfig& c) -> auto& { return c.teacher.batch_size; });
        f["teacher.learning_rate"] =
            real_field("teacher.learning_rate", [](RunConfig& c) -> auto& { return c.teacher.learning_rate; });
        f["teacher.warmup_steps"] =
            size_field("teacher.warmup_steps", [](RunConfig& c) -> auto& { return c.teacher.warmup_steps; });
        f["teacher.weight_decay"] =
            real_field("teacher.weight_decay", [](RunConfig& c) -> auto& { return c.teacher.weight_decay; });
        f["teacher.temperature"] =
            real_field("teacher.temperature", [](RunConfig& c) -> auto& { return c.teacher.temperature; });

        f["distill.scheme"] = {[](RunConfig& c, std::string_view v) { c.student_scheme = posenc::parse_scheme(v); },
                               [](const RunConfig& c) { return std::string(posenc::to_string(c.student_scheme)); }};
        f["distill.loss"] = {[](RunConfig& c, std::string_view v) { c.distill.loss_kind = parse_distill_loss(v); },
                             [](const RunConfig& c) { return std::string(to_string(c.distill.loss_kind)); }};
        f["distill.epochs"] = size_field("distill.epochs", [](RunConfig& c) -> auto& { return c.distill.epochs; });
        f["distill.batch_size"] = size_field("distill.batch_size", [](RunConfig& c) -> auto& { return c.distill.batch_size; });
        f["distill.learning_rate"] =
            real_field("distill.learning_rate", [](RunConfig& c) -> auto& { return c.distill.learning_rate; });
        f["distill.warmup_steps"] =
            size_field("distill.warmup_steps", [](RunConfig& c) -> auto& { return c.distill.warmup_steps; });
        f["distill.weight_decay"] =
            real_field("distill.weight_decay", [](RunConfig& c) -> auto& { return c.distill.weight_decay; });

        f["expand.t_g"] = size_field("expand.t_g", [](RunConfig& c) -> auto& { return c.expand.t_g; });
        f["expand.alpha"] = real_field("expand.alpha", [](RunConfig& c) -> auto& { return c.expand.alpha; });
        f["expand.lambda"] = real_field("expand.lambda", [](RunConfig& c) -> auto& { return c.expand.lambda; });
        f["expand.temperature"] = real_field("expand.temperature", [](RunConfig& c) -> auto& { return c.expand.temperature; });
        f["expand.epochs"] = size_field("expand.epochs", [](RunConfig& c) -> auto& { return c.expand.epochs; });
        f["expand.batch_size"] = size_field("expand.batch_size", [](RunConfig& c) -> auto& { return c.expand.batch_size; });
        f["expand.learning_rate"] =
            real_field("expand.learning_rate", [](RunConfig& c) -> auto& { return c.expand.learning_rate; });
        f["expand.warmup_steps"] =
            size_field("expand.warmup_steps", [](RunConfig& c) -> auto& { return c.expand.warmup_steps; });
        f["expand.weight_decay"] =
            real_field("expand.weight_decay", [](RunConfig& c) -> auto& { return c.expand.weight_decay; });
        f["expand.ntk"] = {[](RunConfig& c, std::string_view v) { c.expand.ntk = parse_bool("expand.ntk", v); },
                           [](const RunConfig& c) { return std::string(c.expand.ntk ? "true" : "false"); }};
        f["expand.vision_trainable"] = {
            [](RunConfig& c, std::string_view v) { c.expand.vision_trainable = parse_bool("expand.vision_trainable", v); },
            [](const RunConfig& c) { return std::string(c.expand.vision_trainable ? "true" : "false"); }};
        return f;
    }();
    return table;
}

}  // namespace

EncoderConfig RunConfig::student_text() const {
    EncoderConfig c = teacher.text;
    c.position.kind = student_scheme;
    return c;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
    try {
        it->second.set(config, value);
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string(key) + ": " + e.what());
    }
    // One seed drives every stage.
    config.teacher.seed = config.distill.seed = config.expand.seed = config.seed;
}

RunConfig parse_run_config(std::string_view text) {
    RunConfig config;
    std::size_t start = 0, line_no = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string trimmed = trim(line);
        if (trimmed.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
        const std::string key = trim(std::string_view(trimmed).substr(0, eq));
        const std::string value = trim(std::string_view(trimmed).substr(eq + 1));
        if (key.empty()) throw ParseError("missing key", line_no);
        try {
            set_config_value(config, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (end == text.size()) break;
    }
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text_file(path)); }

std::map<std::string, std::string> config_snapshot(const RunConfig& config) {
    std::map<std::string, std::string> out;
    for (const auto& [key, field] : fields()) out[key] = field.get(config);
    return out;
}

}  // namespace tulip
