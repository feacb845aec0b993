#include "upcycle/hybrid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "json_io.hpp"
#include "upcycle/layers.hpp"
#include "upcycle/numerics.hpp"

namespace upcycle {

using detail::json;

// ---- layout ----------------------------------------------------------------

bool HybridLayout::is_mla(std::size_t layer) const {
    return std::binary_search(mla_indices.begin(), mla_indices.end(), layer);
}

void HybridLayout::validate() const {
    if (n_layers == 0) throw std::invalid_argument("layout: n_layers must be positive");
    if (linear_kind != "gdn") throw std::invalid_argument("layout: unsupported linear kind '" + linear_kind + "'");
    for (std::size_t i = 0; i < mla_indices.size(); ++i) {
        if (mla_indices[i] >= n_layers) {
            throw std::invalid_argument("layout: MLA index " + std::to_string(mla_indices[i]) + " outside [0, " +
                                        std::to_string(n_layers) + ")");
        }
        if (i > 0 && mla_indices[i] <= mla_indices[i - 1]) {
            throw std::invalid_argument("layout: MLA indices must be strictly increasing");
        }
    }
}

HybridLayout HybridLayout::all_mla(std::size_t n_layers) { return every(n_layers, 1, 0); }

HybridLayout HybridLayout::all_linear(std::size_t n_layers) { return HybridLayout{n_layers, {}, "gdn"}; }

HybridLayout HybridLayout::every(std::size_t n_layers, std::size_t stride, std::size_t first) {
    HybridLayout l{n_layers, {}, "gdn"};
    for (std::size_t i = first; i < n_layers; i += std::max<std::size_t>(stride, 1)) l.mla_indices.push_back(i);
    return l;
}

HybridLayout layout_from_json(const std::string& text) {
    const json j = detail::parse_json(text, "layout");
    HybridLayout l;
    try {
        l.n_layers = detail::get_required<std::size_t>(j, "n_layers", "layout");
        l.mla_indices = detail::get_required<std::vector<std::size_t>>(j, "mla_indices", "layout");
        l.linear_kind = detail::get_or<std::string>(j, "linear_kind", "gdn");
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("layout: ") + e.what());
    }
    std::sort(l.mla_indices.begin(), l.mla_indices.end());
    l.validate();
    return l;
}

std::string layout_to_json(const HybridLayout& l) {
    return json{{"n_layers", l.n_layers}, {"mla_indices", l.mla_indices}, {"linear_kind", l.linear_kind}}.dump();
}

HybridLayout load_layout(const std::filesystem::path& path) { return layout_from_json(read_text_file(path)); }

// ---- block configs ---------------------------------------------------------

namespace {

json mla_json(const MlaConfig& c) {
    return {{"d_model", c.d_model},     {"n_heads", c.n_heads},         {"r_q", c.r_q},
            {"r_kv", c.r_kv},           {"d_qk_nope", c.d_qk_nope},     {"d_qk_rope", c.d_qk_rope},
            {"d_v", c.d_v},             {"nope_mode", c.nope_mode},     {"gate", c.gate},
            {"yarn_factor", c.yarn_factor}, {"rope_theta", c.rope_theta}, {"original_context", c.original_context},
            {"eps", c.eps}};
}

MlaConfig mla_from(const json& j, const TransformerConfig* teacher) {
    MlaConfig c;
    try {
        if (j.contains("cache_per_token")) {
            if (!teacher) throw std::invalid_argument("MLA config: cache_per_token needs a teacher config");
            c = default_mla_config(*teacher, j.at("cache_per_token").get<std::size_t>());
        }
        c.d_model = detail::get_or(j, "d_model", c.d_model);
        c.n_heads = detail::get_or(j, "n_heads", c.n_heads);
        c.r_q = detail::get_or(j, "r_q", c.r_q);
        c.r_kv = detail::get_or(j, "r_kv", c.r_kv);
        c.d_qk_nope = detail::get_or(j, "d_qk_nope", c.d_qk_nope);
        c.d_qk_rope = detail::get_or(j, "d_qk_rope", c.d_qk_rope);
        c.d_v = detail::get_or(j, "d_v", c.d_v);
        c.nope_mode = detail::get_or(j, "nope_mode", c.nope_mode);
        c.gate = detail::get_or(j, "gate", c.gate);
        c.yarn_factor = detail::get_or(j, "yarn_factor", c.yarn_factor);
        c.rope_theta = detail::get_or(j, "rope_theta", c.rope_theta);
        c.original_context = detail::get_or(j, "original_context", c.original_context);
        c.eps = detail::get_or(j, "eps", c.eps);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("MLA config: ") + e.what());
    }
    c.validate();
    return c;
}

json gdn_json(const GdnConfig& c) {
    return {{"d_model", c.d_model}, {"n_heads", c.n_heads},       {"d_k", c.d_k},     {"d_v", c.d_v},
            {"conv_width", c.conv_width}, {"chunk", c.chunk}, {"eps", c.eps}};
}

GdnConfig gdn_from(const json& j, std::size_t d_model) {
    GdnConfig c;
    try {
        const std::size_t d = detail::get_or(j, "d_model", d_model);
        c = default_gdn_config(d, detail::get_or<std::size_t>(j, "n_heads", 0));
        c.d_k = detail::get_or(j, "d_k", c.d_k);
        c.d_v = detail::get_or(j, "d_v", c.d_v);
        c.conv_width = detail::get_or(j, "conv_width", c.conv_width);
        c.chunk = detail::get_or(j, "chunk", c.chunk);
        c.eps = detail::get_or(j, "eps", c.eps);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("GDN config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace

MlaConfig mla_config_from_json(const std::string& text, const TransformerConfig& teacher) {
    return mla_from(detail::parse_json(text, "MLA config"), &teacher);
}

std::string mla_config_to_json(const MlaConfig& cfg) { return mla_json(cfg).dump(2); }

GdnConfig gdn_config_from_json(const std::string& text, std::size_t d_model) {
    return gdn_from(detail::parse_json(text, "GDN config"), d_model);
}

std::string gdn_config_to_json(const GdnConfig& cfg) { return gdn_json(cfg).dump(2); }

// ---- model structure -------------------------------------------------------

namespace {

void check_block_configs(const TransformerConfig& base, const MlaConfig& mla, const GdnConfig& gdn,
                         const HybridLayout& layout) {
    base.validate();
    layout.validate();
    if (layout.n_layers != base.n_layers) {
        throw std::invalid_argument("layout has " + std::to_string(layout.n_layers) + " layers, base config has " +
                                    std::to_string(base.n_layers));
    }
    if (layout.n_mla() > 0) {
        mla.validate();
        if (mla.d_model != base.d_model) throw std::invalid_argument("MLA config d_model differs from base config");
    }
    if (layout.n_mla() < layout.n_layers) {
        gdn.validate();
        if (gdn.d_model != base.d_model) throw std::invalid_argument("GDN config d_model differs from base config");
    }
}

template <typename M, typename Fn>
void visit_hybrid(M& m, const Fn& fn) {
    fn("embed", m.embed);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& layer = m.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        fn(p + "attn_norm", layer.attn_norm);
        if (layer.is_mla()) {
            for_each_param(layer.mla(), p + "mla.", fn);
        } else {
            for_each_param(layer.gdn(), p + "gdn.", fn);
        }
        fn(p + "mlp_norm", layer.mlp_norm);
        fn(p + "mlp.gate", layer.mlp.gate);
        fn(p + "mlp.up", layer.mlp.up);
        fn(p + "mlp.down", layer.mlp.down);
    }
    fn("final_norm", m.final_norm);
    fn("lm_head", m.lm_head);
}

Tensor ones(std::size_t n) {
    Tensor t({n});
    t.fill(1.0);
    return t;
}

}  // namespace

HybridModel hybrid_skeleton(const TransformerConfig& base, const MlaConfig& mla, const GdnConfig& gdn,
                            const HybridLayout& layout) {
    check_block_configs(base, mla, gdn, layout);
    HybridModel m{base, mla, gdn, layout, {}, {}, {}, {}};
    const std::size_t d = base.d_model, f = base.mlp_hidden;
    for (std::size_t i = 0; i < base.n_layers; ++i) {
        HybridLayer layer;
        if (layout.is_mla(i)) {
            layer.mixer = mla_skeleton(mla);
        } else {
            layer.mixer = gdn_skeleton(gdn);
        }
        layer.mlp = MlpWeights{Tensor({f, d}), Tensor({f, d}), Tensor({d, f})};
        layer.attn_norm = ones(d);
        layer.mlp_norm = ones(d);
        m.layers.push_back(std::move(layer));
    }
    m.embed = Tensor({base.vocab, d});
    m.final_norm = ones(d);
    m.lm_head = Tensor({base.vocab, d});
    return m;
}

void for_each_param(HybridModel& m, const ParamVisitor& fn) { visit_hybrid(m, fn); }

void for_each_param(const HybridModel& m, const ConstParamVisitor& fn) { visit_hybrid(m, fn); }

std::size_t param_count(const HybridModel& m) {
    std::size_t n = 0;
    for_each_param(m, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

bool operator==(const HybridModel& a, const HybridModel& b) {
    if (!(a.base == b.base) || !(a.layout == b.layout)) return false;
    if (a.layout.n_mla() > 0 && !(a.mla == b.mla)) return false;
    if (a.layout.n_mla() < a.layout.n_layers && !(a.gdn == b.gdn)) return false;
    std::vector<const Tensor*> ta, tb;
    for_each_param(a, [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    for_each_param(b, [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!(*ta[i] == *tb[i])) return false;
    }
    return true;
}

HybridModel zeros_like(const HybridModel& m) {
    HybridModel z = m;
    for_each_param(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
    return z;
}

HybridModel convert_teacher(const TeacherCheckpoint& teacher, const MlaConfig& mla, const GdnConfig& gdn,
                            const HybridLayout& layout, std::uint64_t seed) {
    const auto& tc = teacher.config;
    HybridModel m = hybrid_skeleton(tc, mla, gdn, layout);
    for (std::size_t i = 0; i < tc.n_layers; ++i) {
        const TeacherLayer& src = teacher.layers[i];
        HybridLayer& dst = m.layers[i];
        if (dst.is_mla()) {
            dst.mixer = init_mla_from_teacher(src.attn, tc, mla);
        } else {
            dst.mixer = init_gdn_from_teacher(src.attn, tc, gdn, seed + i);
        }
        dst.mlp = src.mlp;
        dst.attn_norm = src.attn_norm;
        dst.mlp_norm = src.mlp_norm;
    }
    m.embed = teacher.embed;
    m.final_norm = teacher.final_norm;
    m.lm_head = teacher.lm_head;
    return m;
}

HybridModel assemble_hybrid(const HybridModel& pure_mla, const HybridModel& pure_gdn, const HybridLayout& layout,
                            Donor donor) {
    if (!(pure_mla.base == pure_gdn.base)) {
        throw std::invalid_argument("assemble: MLA and GDN checkpoints have different base configs");
    }
    if (layout.n_layers != pure_mla.base.n_layers) {
        throw std::invalid_argument("assemble: layout has " + std::to_string(layout.n_layers) +
                                    " layers, checkpoints have " + std::to_string(pure_mla.base.n_layers));
    }
    HybridModel m = hybrid_skeleton(pure_mla.base, pure_mla.mla, pure_gdn.gdn, layout);
    for (std::size_t i = 0; i < layout.n_layers; ++i) {
        const HybridModel& src = layout.is_mla(i) ? pure_mla : pure_gdn;
        const HybridLayer& from = src.layers[i];
        if (from.is_mla() != layout.is_mla(i)) {
            throw std::invalid_argument("assemble: layer " + std::to_string(i) + " of the " +
                                        (layout.is_mla(i) ? "MLA" : "GDN") + " checkpoint is not an " +
                                        (layout.is_mla(i) ? "MLA" : "GDN") + " block");
        }
        m.layers[i] = from;
    }
    const HybridModel& d = donor == Donor::mla ? pure_mla : pure_gdn;
    m.embed = d.embed;
    m.final_norm = d.final_norm;
    m.lm_head = d.lm_head;
    return m;
}

TensorContainer hybrid_to_container(const HybridModel& m) {
    TensorContainer c;
    json meta = {{"kind", "hybrid"},
                 {"config", detail::to_json(m.base)},
                 {"layout", detail::parse_json(layout_to_json(m.layout), "layout")}};
    if (m.layout.n_mla() > 0) meta["mla"] = mla_json(m.mla);
    if (m.layout.n_mla() < m.layout.n_layers) meta["gdn"] = gdn_json(m.gdn);
    c.metadata_json = meta.dump();
    detail::add_to_container(c, m);
    return c;
}

HybridModel hybrid_from_container(const TensorContainer& c, LoadReport* report) {
    const json meta = detail::parse_json(c.metadata_json, "container metadata");
    if (detail::get_or<std::string>(meta, "kind", "") != "hybrid") {
        throw std::runtime_error("container does not hold a hybrid/student checkpoint");
    }
    const TransformerConfig base = detail::transformer_config_from(meta.at("config"));
    const HybridLayout layout = layout_from_json(meta.at("layout").dump());
    const MlaConfig mla = meta.contains("mla") ? mla_from(meta.at("mla"), nullptr) : MlaConfig{};
    const GdnConfig gdn = meta.contains("gdn") ? gdn_from(meta.at("gdn"), base.d_model) : GdnConfig{};
    HybridModel m = hybrid_skeleton(base, mla, gdn, layout);
    detail::fill_from_container(c, m, report);
    return m;
}

void save_hybrid(const HybridModel& m, const std::filesystem::path& path) {
    write_container(path, hybrid_to_container(m));
}

HybridModel load_hybrid(const std::filesystem::path& path, LoadReport* report) {
    return hybrid_from_container(read_container(path), report);
}

// ---- forward / backward ----------------------------------------------------

ModelTrace hybrid_forward(const HybridModel& m, const std::vector<TokenId>& tokens, bool want_logits,
                          bool want_trace, HybridTape* tape, GdnMode mode) {
    const double eps = m.base.eps;
    ModelTrace trace;
    Tensor x = embed_tokens(m.embed, tokens);
    if (tape) {
        tape->tokens = tokens;
        tape->layers.assign(m.layers.size(), {});
    }
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const HybridLayer& layer = m.layers[l];
        HybridLayerTape* lt = tape ? &tape->layers[l] : nullptr;
        Tensor n1 = rmsnorm(x, layer.attn_norm, eps);
        Tensor a = layer.is_mla() ? mla_forward(layer.mla(), m.mla, n1, nullptr, 0, lt ? &lt->mla : nullptr)
                                  : gdn_forward(layer.gdn(), m.gdn, n1, nullptr, mode, lt ? &lt->gdn : nullptr);
        if (lt) lt->x_in = x;
        add_inplace(x, a);
        Tensor n2 = rmsnorm(x, layer.mlp_norm, eps);
        if (lt) lt->x_mid = x;
        add_inplace(x, swiglu(layer.mlp, n2));
        if (lt) {
            lt->n1 = std::move(n1);
            lt->n2 = std::move(n2);
            lt->mixed = a;
        }
        if (want_trace) {
            trace.mixer_outputs.push_back(std::move(a));
            trace.hidden_states.push_back(x);
        }
    }
    if (tape) tape->x_final = x;
    trace.final_hidden = rmsnorm(x, m.final_norm, eps);
    if (want_logits) trace.logits = linear(trace.final_hidden, m.lm_head);
    return trace;
}

void hybrid_backward(const HybridModel& m, const HybridTape& tape, const HybridSeeds& seeds, HybridModel& g) {
    const double eps = m.base.eps;
    const std::size_t L = m.layers.size();
    if (tape.layers.size() != L) throw std::invalid_argument("hybrid_backward: tape does not match the model");
    Tensor dx = zeros_like(tape.x_final);
    if (!seeds.d_final_hidden.empty()) {
        dx = rmsnorm_backward(tape.x_final, m.final_norm, eps, seeds.d_final_hidden, g.final_norm);
    }
    for (std::size_t l = L; l-- > 0;) {
        const HybridLayer& layer = m.layers[l];
        HybridLayer& gl = g.layers[l];
        const HybridLayerTape& lt = tape.layers[l];
        if (l < seeds.d_hidden.size() && !seeds.d_hidden[l].empty()) add_inplace(dx, seeds.d_hidden[l]);
        const Tensor dn2 = swiglu_backward(layer.mlp, lt.n2, dx, gl.mlp);
        add_inplace(dx, rmsnorm_backward(lt.x_mid, layer.mlp_norm, eps, dn2, gl.mlp_norm));
        Tensor da = dx;
        if (l < seeds.d_mixer.size() && !seeds.d_mixer[l].empty()) add_inplace(da, seeds.d_mixer[l]);
        const Tensor dn1 = layer.is_mla() ? mla_backward(layer.mla(), m.mla, lt.mla, da, gl.mla())
                                          : gdn_backward(layer.gdn(), m.gdn, lt.gdn, da, gl.gdn());
        add_inplace(dx, rmsnorm_backward(lt.x_in, layer.attn_norm, eps, dn1, gl.attn_norm));
    }
    for (std::size_t t = 0; t < tape.tokens.size(); ++t) {
        axpy(g.embed.row(static_cast<std::size_t>(tape.tokens[t])), 1.0, dx.row(t));
    }
}

DecodeSession::DecodeSession(const HybridModel& model, GdnMode mode)
    : model_(&model), mode_(mode), mla_caches_(model.layers.size()), gdn_states_(model.layers.size()) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (model.layers[l].is_mla()) {
            mla_caches_[l].latents = Tensor({0, model.mla.r_kv});
            mla_caches_[l].rope_keys = Tensor({0, model.mla.d_qk_rope});
        } else {
            gdn_states_[l] = gdn_initial_state(model.gdn);
        }
    }
}

Tensor DecodeSession::feed(const std::vector<TokenId>& tokens) {
    const HybridModel& m = *model_;
    const double eps = m.base.eps;
    Tensor x = embed_tokens(m.embed, tokens);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const HybridLayer& layer = m.layers[l];
        const Tensor n1 = rmsnorm(x, layer.attn_norm, eps);
        add_inplace(x, layer.is_mla() ? mla_forward(layer.mla(), m.mla, n1, &mla_caches_[l], position_)
                                      : gdn_forward(layer.gdn(), m.gdn, n1, &gdn_states_[l], mode_));
        add_inplace(x, swiglu(layer.mlp, rmsnorm(x, layer.mlp_norm, eps)));
    }
    position_ += tokens.size();
    return rmsnorm(x, m.final_norm, eps);
}

Tensor DecodeSession::logits(const std::vector<TokenId>& tokens) { return linear(feed(tokens), model_->lm_head); }

std::size_t DecodeSession::mla_cache_elements() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < mla_caches_.size(); ++l) {
        if (model_->layers[l].is_mla()) n += mla_caches_[l].elements();
    }
    return n;
}

std::size_t DecodeSession::gdn_state_elements() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < gdn_states_.size(); ++l) {
        if (!model_->layers[l].is_mla()) n += gdn_states_[l].elements();
    }
    return n;
}

const MlaCache& DecodeSession::mla_cache(std::size_t layer) const {
    if (layer >= mla_caches_.size() || !model_->layers[layer].is_mla()) {
        throw std::out_of_range("layer " + std::to_string(layer) + " has no MLA cache");
    }
    return mla_caches_[layer];
}

// ---- accounting ------------------------------------------------------------

std::string KvCacheReport::percent() const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", ratio * 100.0);
    return buf;
}

KvCacheReport kv_cache_report(const HybridLayout& layout, const TransformerConfig& teacher, const MlaConfig& mla) {
    KvCacheReport r;
    r.teacher_per_token = teacher.n_layers * 2 * teacher.n_kv_heads * teacher.head_dim;
    r.hybrid_per_token = layout.n_mla() * mla.cache_elements_per_token();
    r.ratio = static_cast<double>(r.hybrid_per_token) / static_cast<double>(r.teacher_per_token);
    return r;
}

MemoryTechnique parse_memory_technique(const std::string& name) {
    if (name == "fused-ce" || name == "chunked-ce") return MemoryTechnique::fused_linear_ce;
    if (name == "chunked-kl") return MemoryTechnique::chunked_kl;
    if (name == "online-kl") return MemoryTechnique::online_kl;
    if (name == "hidden-kl") return MemoryTechnique::hidden_kl;
    throw std::invalid_argument("unknown memory technique '" + name +
                                "' (expected fused-ce, chunked-ce, chunked-kl, online-kl, hidden-kl)");
}

std::string technique_name(MemoryTechnique t) {
    switch (t) {
        case MemoryTechnique::fused_linear_ce: return "fused-ce";
        case MemoryTechnique::chunked_kl: return "chunked-kl";
        case MemoryTechnique::online_kl: return "online-kl";
        case MemoryTechnique::hidden_kl: return "hidden-kl";
    }
    return "?";
}

MemoryPlan memory_plan(std::size_t tokens, std::size_t vocab, const std::set<MemoryTechnique>& techniques) {
    if (tokens == 0 || vocab == 0) throw std::invalid_argument("memory_plan: tokens and vocab must be positive");
    MemoryPlan p;
    p.tokens = tokens;
    p.vocab = vocab;
    const std::size_t tv = tokens * vocab;
    p.logit_tensor_bytes = tv * kBytesPerElement;

    using MT = MemoryTechnique;
    // Each row lists the techniques that eliminate it, most specific first.
    struct Spec {
        const char* name;
        std::vector<MT> removers;
    };
    const std::vector<Spec> specs = {
        {"student logits", {MT::hidden_kl, MT::fused_linear_ce}},
        {"teacher logits", {MT::hidden_kl}},
        {"student softmax", {MT::online_kl, MT::chunked_kl}},
        {"teacher softmax", {MT::online_kl, MT::chunked_kl}},
        {"logit gradient", {MT::online_kl}},
    };
    for (const auto& s : specs) {
        MemoryRow row{s.name, tv, p.logit_tensor_bytes, std::nullopt};
        for (MT t : s.removers) {
            if (techniques.count(t)) {
                row.removed_by = t;
                break;
            }
        }
        p.baseline_bytes += row.bytes;
        if (!row.removed_by) p.residual_bytes += row.bytes;
        p.rows.push_back(std::move(row));
    }
    const std::vector<std::pair<MT, std::pair<const char*, std::size_t>>> table = {
        {MT::fused_linear_ce, {"Student logits (T x V)", 1}},
        {MT::chunked_kl, {"Softmax tensors 2(T x V)", 2}},
        {MT::online_kl, {"Softmax + grad 3(T x V)", 3}},
        {MT::hidden_kl, {"Both logit matrices 2(T x V)", 2}},
    };
    for (const auto& [t, info] : table) {
        if (techniques.count(t)) {
            p.savings.push_back({t, info.first, info.second, info.second * p.logit_tensor_bytes});
        }
    }
    return p;
}

std::string group_thousands(std::size_t n) {
    std::string digits = std::to_string(n), out;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
        out += digits[i];
    }
    return out;
}

std::string approx_bytes(std::size_t bytes) {
    static const char* units[] = {"B", "KB", "MB", "GB", "TB"};
    double v = static_cast<double>(bytes);
    std::size_t u = 0;
    while (v >= 1024.0 && u + 1 < std::size(units)) {
        v /= 1024.0;
        ++u;
    }
    char buf[48];
    std::snprintf(buf, sizeof buf, "≈%.0f %s", v, units[u]);
    return buf;
}

}  // namespace upcycle
