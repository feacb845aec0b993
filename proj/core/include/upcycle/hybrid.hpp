#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "upcycle/checkpoint.hpp"
#include "upcycle/gdn.hpp"
#include "upcycle/mla.hpp"
#include "upcycle/teacher.hpp"

namespace upcycle {

// Which layers are latent attention; the rest are linear (GDN) mixers.
struct HybridLayout {
    std::size_t n_layers = 0;
    std::vector<std::size_t> mla_indices;  // sorted, unique
    std::string linear_kind = "gdn";

    bool is_mla(std::size_t layer) const;
    std::size_t n_mla() const { return mla_indices.size(); }
    void validate() const;

    static HybridLayout all_mla(std::size_t n_layers);
    static HybridLayout all_linear(std::size_t n_layers);
    // Every `stride`-th layer starting at `first`.
    static HybridLayout every(std::size_t n_layers, std::size_t stride, std::size_t first = 0);

    friend bool operator==(const HybridLayout&, const HybridLayout&) = default;
};

HybridLayout layout_from_json(const std::string& text);
std::string layout_to_json(const HybridLayout& layout);
HybridLayout load_layout(const std::filesystem::path& path);

// MLA configs accept {"cache_per_token": c} as a shorthand expanded with
// default_mla_config(teacher, c); explicit fields override it.
MlaConfig mla_config_from_json(const std::string& text, const TransformerConfig& teacher);
std::string mla_config_to_json(const MlaConfig& cfg);
GdnConfig gdn_config_from_json(const std::string& text, std::size_t d_model);
std::string gdn_config_to_json(const GdnConfig& cfg);

struct HybridLayer {
    std::variant<MlaBlockWeights, GdnBlockWeights> mixer;
    MlpWeights mlp;
    Tensor attn_norm;  // pre-mixer RMSNorm
    Tensor mlp_norm;

    bool is_mla() const { return mixer.index() == 0; }
    MlaBlockWeights& mla() { return std::get<MlaBlockWeights>(mixer); }
    const MlaBlockWeights& mla() const { return std::get<MlaBlockWeights>(mixer); }
    GdnBlockWeights& gdn() { return std::get<GdnBlockWeights>(mixer); }
    const GdnBlockWeights& gdn() const { return std::get<GdnBlockWeights>(mixer); }
};

// A student stack. Pure MLA and pure GDN models are the layouts with all or
// none of the layers in mla_indices.
struct HybridModel {
    TransformerConfig base;
    MlaConfig mla;
    GdnConfig gdn;
    HybridLayout layout;
    std::vector<HybridLayer> layers;
    Tensor embed;
    Tensor final_norm;
    Tensor lm_head;
};

HybridModel hybrid_skeleton(const TransformerConfig& base, const MlaConfig& mla, const GdnConfig& gdn,
                            const HybridLayout& layout);

// Names: embed, layers.{i}.attn_norm, layers.{i}.mla.* or layers.{i}.gdn.*,
// layers.{i}.mlp_norm, layers.{i}.mlp.{gate,up,down}, final_norm, lm_head.
void for_each_param(HybridModel& m, const ParamVisitor& fn);
void for_each_param(const HybridModel& m, const ConstParamVisitor& fn);
std::size_t param_count(const HybridModel& m);
bool operator==(const HybridModel& a, const HybridModel& b);

// Zero tensors shaped like every parameter of m.
HybridModel zeros_like(const HybridModel& m);

// Builds a student by converting each teacher attention layer: MLA layers
// through the SVD initialization, GDN layers through init_gdn_from_teacher
// (seeded with seed + layer index). MLPs, norms, embeddings and the LM head
// are copied.
HybridModel convert_teacher(const TeacherCheckpoint& teacher, const MlaConfig& mla, const GdnConfig& gdn,
                            const HybridLayout& layout, std::uint64_t seed = 0);

enum class Donor { mla, gdn };

// Layers in layout.mla_indices come from pure_mla, the others from
// pure_gdn, each with its own MLP and norms. Embedding, final norm and LM
// head come from the donor.
HybridModel assemble_hybrid(const HybridModel& pure_mla, const HybridModel& pure_gdn, const HybridLayout& layout,
                            Donor donor = Donor::mla);

TensorContainer hybrid_to_container(const HybridModel& m);
HybridModel hybrid_from_container(const TensorContainer& c, LoadReport* report = nullptr);
void save_hybrid(const HybridModel& m, const std::filesystem::path& path);
HybridModel load_hybrid(const std::filesystem::path& path, LoadReport* report = nullptr);

// ---- forward / backward ----------------------------------------------------

struct HybridLayerTape {
    Tensor x_in, n1, mixed, x_mid, n2;
    MlaTape mla;
    GdnTape gdn;
};

struct HybridTape {
    std::vector<TokenId> tokens;
    std::vector<HybridLayerTape> layers;
    Tensor x_final;  // residual stream before the final norm
};

// Same trace layout as teacher_forward. With a tape, GDN layers run the
// sequential kernel so the backward pass can replay the states.
ModelTrace hybrid_forward(const HybridModel& m, const std::vector<TokenId>& tokens, bool want_logits,
                          bool want_trace, HybridTape* tape = nullptr, GdnMode mode = GdnMode::chunked);

// Upstream gradients for a traced forward. Empty tensors mean zero.
struct HybridSeeds {
    Tensor d_final_hidden;
    std::vector<Tensor> d_hidden;  // per layer, w.r.t. trace.hidden_states
    std::vector<Tensor> d_mixer;   // per layer, w.r.t. trace.mixer_outputs
};

// Accumulates parameter gradients into grads (shaped like m).
void hybrid_backward(const HybridModel& m, const HybridTape& tape, const HybridSeeds& seeds, HybridModel& grads);

// Incremental decoding: MLA layers keep latent caches, GDN layers keep
// recurrent state. feed() runs any number of new tokens and returns their
// final hidden states (T x d); logits() applies the LM head.
class DecodeSession {
public:
    explicit DecodeSession(const HybridModel& model, GdnMode mode = GdnMode::chunked);

    Tensor feed(const std::vector<TokenId>& tokens);
    Tensor logits(const std::vector<TokenId>& tokens);
    std::size_t position() const { return position_; }
    std::size_t mla_cache_elements() const;
    std::size_t gdn_state_elements() const;
    const MlaCache& mla_cache(std::size_t layer) const;

private:
    const HybridModel* model_;
    GdnMode mode_;
    std::size_t position_ = 0;
    std::vector<MlaCache> mla_caches_;
    std::vector<GdnState> gdn_states_;
};

// ---- accounting ------------------------------------------------------------

struct KvCacheReport {
    std::size_t teacher_per_token = 0;  // L 2 H_kv d_h
    std::size_t hybrid_per_token = 0;   // |MLA layers| (r_kv + d_qk_rope)
    double ratio = 0;
    std::string percent() const;  // one decimal, e.g. "3.9%"
};

KvCacheReport kv_cache_report(const HybridLayout& layout, const TransformerConfig& teacher, const MlaConfig& mla);

enum class MemoryTechnique { fused_linear_ce, chunked_kl, online_kl, hidden_kl };

// Accepts fused-ce (alias chunked-ce), chunked-kl, online-kl, hidden-kl.
MemoryTechnique parse_memory_technique(const std::string& name);
std::string technique_name(MemoryTechnique t);

struct MemoryRow {
    std::string name;
    std::size_t elements = 0;
    std::size_t bytes = 0;
    std::optional<MemoryTechnique> removed_by;
};

struct TechniqueSaving {
    MemoryTechnique technique;
    std::string saves;            // e.g. "Softmax tensors 2(T x V)"
    std::size_t multiple = 0;     // in units of T x V
    std::size_t bytes = 0;
};

// Logit-side transients of one distillation step in bf16: student and
// teacher logits, both softmaxes and the logit gradient.
struct MemoryPlan {
    std::size_t tokens = 0;
    std::size_t vocab = 0;
    std::size_t logit_tensor_bytes = 0;
    std::vector<MemoryRow> rows;
    std::vector<TechniqueSaving> savings;
    std::size_t baseline_bytes = 0;
    std::size_t residual_bytes = 0;
};

inline constexpr std::size_t kBytesPerElement = 2;

MemoryPlan memory_plan(std::size_t tokens, std::size_t vocab, const std::set<MemoryTechnique>& techniques = {});

// "16,810,934,272"
std::string group_thousands(std::size_t n);
// Rounded binary units, e.g. "≈16 GB".
std::string approx_bytes(std::size_t bytes);

}  // namespace upcycle
