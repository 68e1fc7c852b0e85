#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tulip/encoder.hpp"
#include "tulip/error.hpp"

namespace tulip {

namespace {

using Json = nlohmann::ordered_json;
constexpr const char* kFormat = "tulip-checkpoint";

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

Json text_config_json(const EncoderConfig& c) {
    Json pos;
    pos["scheme"] = std::string(posenc::to_string(c.position.kind));
    pos["max_positions"] = c.position.max_positions;
    pos["rope_base"] = c.position.rope_base;
    pos["ntk_factor"] = c.position.ntk_factor;
    pos["cope_pmax"] = c.position.cope_pmax;
    Json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["mlp_ratio"] = c.mlp_ratio;
    j["projection_dim"] = c.projection_dim;
    j["context_length"] = c.context_length;
    j["position"] = pos;
    return j;
}

EncoderConfig text_config_from(const Json& j) {
    EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.projection_dim = j.at("projection_dim").get<std::size_t>();
    c.context_length = j.at("context_length").get<std::size_t>();
    const Json& pos = j.at("position");
    c.position.kind = posenc::parse_scheme(pos.at("scheme").get<std::string>());
    c.position.max_positions = pos.at("max_positions").get<std::size_t>();
    c.position.rope_base = pos.at("rope_base").get<double>();
    c.position.ntk_factor = pos.at("ntk_factor").get<double>();
    c.position.cope_pmax = pos.at("cope_pmax").get<std::size_t>();
    return c;
}

Json image_config_json(const ImageConfig& c) {
    Json j;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["channels"] = c.channels;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_layers"] = c.n_layers;
    j["mlp_ratio"] = c.mlp_ratio;
    j["projection_dim"] = c.projection_dim;
    return j;
}

ImageConfig image_config_from(const Json& j) {
    ImageConfig c;
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.projection_dim = j.at("projection_dim").get<std::size_t>();
    return c;
}

void append_le(std::string& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double read_le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

// Named tensors of a model in serialization order.
std::vector<std::pair<std::string, const Tensor*>> ordered_tensors(const DualEncoder& m, const Tensor& temperature) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    visit_text([&](const std::string& name, const Tensor& t) { out.emplace_back("text." + name, &t); }, m.text);
    if (m.image)
        visit_image([&](const std::string& name, const Tensor& t) { out.emplace_back("image." + name, &t); },
                    *m.image);
    out.emplace_back("temperature", &temperature);
    return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
    const DualEncoder& m = checkpoint.model;
    if (m.image.has_value() != m.image_config.has_value())
        throw ContractError("checkpoint image params and image config must be present together");
    const Tensor temperature = Tensor::scalar(m.temperature);
    const auto tensors = ordered_tensors(m, temperature);

    Json header;
    header["format"] = kFormat;
    header["version"] = Checkpoint::kFormatVersion;
    header["phase"] = checkpoint.phase;
    header["seed"] = checkpoint.seed;
    header["text_config"] = text_config_json(m.text_config);
    header["image_config"] = m.image_config ? image_config_json(*m.image_config) : Json(nullptr);
    Json list = Json::array();
    std::size_t payload = 0;
    for (const auto& [name, t] : tensors) {
        list.push_back({{"name", name}, {"shape", t->shape()}});
        payload += t->size();
    }
    header["tensors"] = list;

    std::string out = header.dump();
    out.push_back('\n');
    out.reserve(out.size() + payload * 8);
    for (const auto& entry : tensors)
        for (double v : entry.second->data()) append_le(out, v);
    return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    const std::size_t newline = bytes.find('\n');
    if (newline == std::string_view::npos) throw ParseError("checkpoint header is not terminated", 1);
    Json header;
    try {
        header = Json::parse(bytes.substr(0, newline));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 1);
    }

    Checkpoint ck;
    std::vector<std::pair<std::string, Shape>> declared;
    try {
        if (header.at("format").get<std::string>() != kFormat) throw ParseError("not a tulip checkpoint", 1);
        const int version = header.at("version").get<int>();
        if (version != Checkpoint::kFormatVersion)
            throw ParseError("unsupported checkpoint version " + std::to_string(version), 1);
        ck.phase = header.at("phase").get<std::string>();
        ck.seed = header.at("seed").get<std::uint64_t>();
        ck.model.text_config = text_config_from(header.at("text_config"));
        if (!header.at("image_config").is_null()) ck.model.image_config = image_config_from(header.at("image_config"));
        for (const Json& t : header.at("tensors"))
            declared.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 1);
    }

    // Shapes come from the configs; the header list must agree with them exactly.
    ck.model.text = init_text_params(ck.model.text_config, 0);
    if (ck.model.image_config) ck.model.image = init_image_params(*ck.model.image_config, 0);
    Tensor temperature = Tensor::scalar(0.0);
    std::vector<std::pair<std::string, Tensor*>> targets;
    visit_text([&](const std::string& name, Tensor& t) { targets.emplace_back("text." + name, &t); }, ck.model.text);
    if (ck.model.image)
        visit_image([&](const std::string& name, Tensor& t) { targets.emplace_back("image." + name, &t); },
                    *ck.model.image);
    targets.emplace_back("temperature", &temperature);

    if (targets.size() != declared.size())
        throw ParseError("checkpoint declares " + std::to_string(declared.size()) + " tensors, config implies " +
                             std::to_string(targets.size()),
                         1);
    std::size_t total = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (declared[i].first != targets[i].first || declared[i].second != targets[i].second->shape())
            throw ParseError("tensor " + declared[i].first + " " + shape_string(declared[i].second) +
                                 " does not match expected " + targets[i].first + " " +
                                 shape_string(targets[i].second->shape()),
                             1);
        total += targets[i].second->size();
    }
    const std::string_view payload = bytes.substr(newline + 1);
    if (payload.size() != total * 8)
        throw ParseError("checkpoint payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                             std::to_string(total * 8),
                         2);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (auto& entry : targets)
        for (double& v : entry.second->data()) {
            v = read_le(p);
            p += 8;
        }
    ck.model.temperature = temperature.item();
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    const std::string bytes = serialize_checkpoint(checkpoint);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_checkpoint(buf.str());
}

}  // namespace tulip
