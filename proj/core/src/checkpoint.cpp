#include "upcycle/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json_io.hpp"

namespace upcycle {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

void TransformerConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("transformer config: ") + name + " must be positive");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_q_heads, "n_q_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(vocab, "vocab");
    positive(mlp_hidden, "mlp_hidden");
    positive(max_position, "max_position");
    if (n_q_heads % n_kv_heads != 0) {
        throw std::invalid_argument("transformer config: n_q_heads must be divisible by n_kv_heads");
    }
    if (head_dim % 2 != 0) throw std::invalid_argument("transformer config: head_dim must be even for RoPE");
    if (!(rope_theta > 0) || !(eps > 0)) {
        throw std::invalid_argument("transformer config: rope_theta and eps must be positive");
    }
}

TeacherCheckpoint teacher_skeleton(const TransformerConfig& c) {
    c.validate();
    const std::size_t d = c.d_model, qd = c.n_q_heads * c.head_dim, kvd = c.n_kv_heads * c.head_dim;
    TeacherCheckpoint t;
    t.config = c;
    t.embed = Tensor({c.vocab, d});
    t.final_norm = Tensor({d});
    t.lm_head = Tensor({c.vocab, d});
    t.layers.resize(c.n_layers);
    for (auto& layer : t.layers) {
        layer.attn.wq = Tensor({qd, d});
        layer.attn.wk = Tensor({kvd, d});
        layer.attn.wv = Tensor({kvd, d});
        layer.attn.wo = Tensor({d, qd});
        if (c.qk_norm) {
            layer.attn.q_norm = Tensor({c.head_dim});
            layer.attn.k_norm = Tensor({c.head_dim});
        }
        layer.mlp.gate = Tensor({c.mlp_hidden, d});
        layer.mlp.up = Tensor({c.mlp_hidden, d});
        layer.mlp.down = Tensor({d, c.mlp_hidden});
        layer.attn_norm = Tensor({d});
        layer.mlp_norm = Tensor({d});
    }
    return t;
}

namespace {

template <typename Ckpt, typename Fn>
void visit_teacher(Ckpt& t, Fn&& fn) {
    fn("embed", t.embed);
    for (std::size_t i = 0; i < t.layers.size(); ++i) {
        auto& l = t.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        fn(p + "attn_norm", l.attn_norm);
        fn(p + "attn.wq", l.attn.wq);
        fn(p + "attn.wk", l.attn.wk);
        fn(p + "attn.wv", l.attn.wv);
        fn(p + "attn.wo", l.attn.wo);
        if (!l.attn.q_norm.empty()) fn(p + "attn.q_norm", l.attn.q_norm);
        if (!l.attn.k_norm.empty()) fn(p + "attn.k_norm", l.attn.k_norm);
        fn(p + "mlp_norm", l.mlp_norm);
        fn(p + "mlp.gate", l.mlp.gate);
        fn(p + "mlp.up", l.mlp.up);
        fn(p + "mlp.down", l.mlp.down);
    }
    fn("final_norm", t.final_norm);
    fn("lm_head", t.lm_head);
}

bool is_norm_name(const std::string& name) { return name.find("norm") != std::string::npos; }

}  // namespace

void for_each_param(TeacherCheckpoint& ckpt, const ParamVisitor& fn) { visit_teacher(ckpt, fn); }

void for_each_param(const TeacherCheckpoint& ckpt, const ConstParamVisitor& fn) { visit_teacher(ckpt, fn); }

bool operator==(const TeacherCheckpoint& a, const TeacherCheckpoint& b) {
    if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
    std::vector<const Tensor*> ta, tb;
    for_each_param(a, [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    for_each_param(b, [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!(*ta[i] == *tb[i])) return false;
    }
    return true;
}

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next() { return engine_(); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller; one draw per call keeps the stream simple to reason about.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

std::size_t Rng::below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

TeacherCheckpoint gen_toy_teacher(const TransformerConfig& config, std::uint64_t seed) {
    TeacherCheckpoint t = teacher_skeleton(config);
    Rng rng(seed);
    for_each_param(t, [&](const std::string& name, Tensor& w) {
        if (is_norm_name(name)) {
            w.fill(1.0);
            return;
        }
        const double s = name == "embed" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(w.cols()));
        for (double& v : w.values()) v = static_cast<double>(static_cast<float>(rng.uniform(-s, s)));
    });
    return t;
}

// ---- container ------------------------------------------------------------

namespace {

constexpr std::size_t kAlign = 8;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

std::vector<std::uint8_t> encode_container(const TensorContainer& c) {
    using detail::json;
    json header = json::object();
    header["__metadata__"] = detail::parse_json(c.metadata_json, "container metadata");
    std::size_t offset = 0;
    for (const auto& [name, t] : c.tensors) {
        if (name == "__metadata__") throw std::invalid_argument("tensor name '__metadata__' is reserved");
        if (!t.all_finite()) throw std::invalid_argument("tensor '" + name + "' contains non-finite values");
        const std::size_t len = 4 * t.size();
        header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"byte_offset", offset}, {"byte_length", len}};
        offset = align_up(offset + len);
    }
    std::string text = header.dump();
    text.append(align_up(text.size()) - text.size(), ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t base = out.size();
    out.resize(base + offset, 0);
    for (const auto& [name, t] : c.tensors) {
        const std::size_t at = base + header[name]["byte_offset"].get<std::size_t>();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const float f = static_cast<float>(t[i]);
            std::memcpy(out.data() + at + 4 * i, &f, 4);
        }
    }
    return out;
}

TensorContainer decode_container(const std::vector<std::uint8_t>& bytes) {
    using detail::json;
    if (bytes.size() < 8) throw std::runtime_error("malformed header: file shorter than length prefix");
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    if (hlen > bytes.size() - 8) throw std::runtime_error("malformed header: header length exceeds file size");
    const std::string text(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("malformed header: ") + e.what());
    }
    if (!header.is_object()) throw std::runtime_error("malformed header: expected a JSON object");

    const std::size_t base = 8 + hlen;
    const std::size_t payload = bytes.size() - base;
    TensorContainer c;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            c.metadata_json = it.value().dump();
            continue;
        }
        const json& e = it.value();
        try {
            if (e.at("dtype").get<std::string>() != "f32") {
                throw std::runtime_error("tensor '" + name + "' has unsupported dtype " + e.at("dtype").dump());
            }
            Shape shape = e.at("shape").get<Shape>();
            const auto off = e.at("byte_offset").get<std::size_t>();
            const auto len = e.at("byte_length").get<std::size_t>();
            const std::size_t n = shape_numel(shape);
            if (len != 4 * n) {
                throw std::runtime_error("tensor '" + name + "' byte_length " + std::to_string(len) +
                                         " disagrees with shape " + shape_str(shape));
            }
            if (off % kAlign != 0) throw std::runtime_error("tensor '" + name + "' offset is not 8-byte aligned");
            if (off + len > payload) throw std::runtime_error("payload shorter than index (tensor '" + name + "')");
            std::vector<double> values(n);
            for (std::size_t i = 0; i < n; ++i) {
                float f;
                std::memcpy(&f, bytes.data() + base + off + 4 * i, 4);
                if (!std::isfinite(f)) throw std::runtime_error("tensor '" + name + "' has non-finite payload");
                values[i] = f;
            }
            spans.emplace_back(off, len);
            c.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
        } catch (const json::exception& ex) {
            throw std::runtime_error("malformed header entry '" + name + "': " + ex.what());
        }
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
            throw std::runtime_error("malformed header: tensor payloads overlap");
        }
    }
    return c;
}

void write_container(const std::filesystem::path& path, const TensorContainer& c) {
    const auto bytes = encode_container(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

TensorContainer read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_container(bytes);
}

TensorContainer teacher_to_container(const TeacherCheckpoint& ckpt) {
    TensorContainer c;
    detail::json meta = {{"kind", "teacher"}, {"config", detail::to_json(ckpt.config)}};
    c.metadata_json = meta.dump();
    detail::add_to_container(c, ckpt);
    return c;
}

TeacherCheckpoint teacher_from_container(const TensorContainer& c, LoadReport* report) {
    const auto meta = detail::parse_json(c.metadata_json, "container metadata");
    if (detail::get_or<std::string>(meta, "kind", "") != "teacher") {
        throw std::runtime_error("container does not hold a teacher checkpoint");
    }
    TeacherCheckpoint t = teacher_skeleton(detail::transformer_config_from(meta.at("config")));
    detail::fill_from_container(c, t, report);
    return t;
}

void save_teacher(const TeacherCheckpoint& ckpt, const std::filesystem::path& path) {
    write_container(path, teacher_to_container(ckpt));
}

TeacherCheckpoint load_teacher(const std::filesystem::path& path, LoadReport* report) {
    return teacher_from_container(read_container(path), report);
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string transformer_config_to_json(const TransformerConfig& c) { return detail::to_json(c).dump(2); }

TransformerConfig transformer_config_from_json(const std::string& text) {
    return detail::transformer_config_from(detail::parse_json(text, "transformer config"));
}

TransformerConfig load_transformer_config(const std::filesystem::path& path) {
    return transformer_config_from_json(read_text_file(path));
}

namespace detail {

json parse_json(const std::string& text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string(what) + " is not valid JSON: " + e.what());
    }
}

json to_json(const TransformerConfig& c) {
    return {{"d_model", c.d_model},       {"n_layers", c.n_layers},     {"n_q_heads", c.n_q_heads},
            {"n_kv_heads", c.n_kv_heads}, {"head_dim", c.head_dim},     {"vocab", c.vocab},
            {"mlp_hidden", c.mlp_hidden}, {"rope_theta", c.rope_theta}, {"eps", c.eps},
            {"max_position", c.max_position}, {"qk_norm", c.qk_norm}};
}

TransformerConfig transformer_config_from(const json& j) {
    constexpr const char* what = "transformer config";
    TransformerConfig c;
    try {
        c.d_model = get_required<std::size_t>(j, "d_model", what);
        c.n_layers = get_required<std::size_t>(j, "n_layers", what);
        c.n_q_heads = get_required<std::size_t>(j, "n_q_heads", what);
        c.n_kv_heads = get_required<std::size_t>(j, "n_kv_heads", what);
        c.head_dim = get_required<std::size_t>(j, "head_dim", what);
        c.vocab = get_required<std::size_t>(j, "vocab", what);
        c.mlp_hidden = get_required<std::size_t>(j, "mlp_hidden", what);
        c.rope_theta = get_or<double>(j, "rope_theta", c.rope_theta);
        c.eps = get_or<double>(j, "eps", c.eps);
        c.max_position = get_or<std::size_t>(j, "max_position", c.max_position);
        c.qk_norm = get_or<bool>(j, "qk_norm", c.qk_norm);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string(what) + ": " + e.what());
    }
    c.validate();
    return c;
}

}  // namespace detail

}  // namespace upcycle
