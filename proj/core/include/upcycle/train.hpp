#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "upcycle/hybrid.hpp"
#include "upcycle/losses.hpp"

namespace upcycle {

// ---- optimization ------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
};

using ParamFilter = std::function<bool(const std::string& name)>;

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Updates every parameter accepted by `trainable`. Returns the gradient
    // norm before clipping.
    double step(HybridModel& model, const HybridModel& grads, double lr, const ParamFilter& trainable);
    std::size_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0.
double cosine_lr(std::size_t step, std::size_t total, double base_lr, double warmup_ratio);

// ---- data ----------------------------------------------------------------------

// Sparse random bigram chain: every token has `branching` successors with
// random weights.
class MarkovCorpus {
public:
    MarkovCorpus(std::size_t vocab, std::uint64_t seed, std::size_t branching = 4);
    std::vector<TokenId> sample(std::size_t length, Rng& rng) const;
    std::size_t vocab() const { return next_.size(); }

private:
    std::vector<std::vector<TokenId>> next_;
    std::vector<std::vector<double>> cdf_;
};

// ---- training --------------------------------------------------------------

enum class KlPath { naive, chunked, online, hidden };
KlPath parse_kl_path(const std::string& name);
std::string kl_path_name(KlPath p);

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t context = 128;
    std::size_t batch = 1;
    double lr = 1e-3;
    double warmup_ratio = 0.01;
    std::uint64_t seed = 0;
    KlPath path = KlPath::naive;
    LossConfig loss;
    AdamConfig adam;
    bool train_embeddings = false;  // Stage I only; Stage II trains everything
    void validate() const;
};

struct StepRecord {
    std::size_t step = 0;
    double loss = 0;
    double lr = 0;
    double grad_norm = 0;
};

struct TrainReport {
    std::string stage;
    std::vector<StepRecord> steps;
    std::map<std::string, double> metrics;
    double wall_seconds = 0;
    std::size_t peak_elements = 0;

    // 1 - mean(last `window` losses) / mean(first `window` losses)
    double smoothed_reduction(std::size_t window = 5) const;
    std::string json_lines() const;    // one record per step
    std::string summary_json() const;  // single document
};

// Enhanced ILD: per-layer Frobenius distance of residual streams and mixer
// outputs against the teacher, on sequences sampled from `data`.
TrainReport train_stage1_ild(HybridModel& student, const TeacherCheckpoint& teacher, const MarkovCorpus& data,
                             const TrainConfig& cfg);

// Output-level KD on the selected KL path. The teacher runs without a
// backward pass; on the hidden path it never produces logits.
TrainReport train_stage2_kd(HybridModel& student, const TeacherCheckpoint& teacher, const MarkovCorpus& data,
                            const TrainConfig& cfg);

struct KdEval {
    double kl = 0;                 // mean token KL(p_s || p_t)
    double argmax_agreement = 0;  // fraction of positions with equal argmax
};
KdEval evaluate_kd(const HybridModel& student, const TeacherCheckpoint& teacher,
                   const std::vector<std::vector<TokenId>>& sequences);

// FNV-1a over every parameter's bytes, in canonical order.
std::uint64_t weights_hash(const TeacherCheckpoint& t);
std::uint64_t weights_hash(const HybridModel& m);

// ---- gradient audit ----------------------------------------------------------

struct ParamProbe {
    std::string name;
    Tensor* value = nullptr;
    const Tensor* grad = nullptr;
};

struct GradAuditResult {
    double max_rel_error = 0;
    std::size_t probes = 0;
    std::string worst;  // "name[i] fd=... an=..."
};

// Central differences with step rel_step * max(|theta|, 1) on `n_probes`
// randomly chosen scalars, compared to the analytic gradients. Relative
// error is |fd - an| / max(|fd|, |an|, abs_floor).
GradAuditResult grad_audit(const std::vector<ParamProbe>& params, const std::function<double()>& loss,
                           std::size_t n_probes, std::uint64_t seed, double rel_step = 1e-3,
                           double abs_floor = 1e-6);

enum class AuditTarget { kl_naive, fused_linear_ce, mla_block, gdn_block, hybrid_model };

// Builds a small random problem for the target (blocks are scored through
// kl_naive on a fixed random head) and audits it.
GradAuditResult audit_target(AuditTarget target, std::uint64_t seed, std::size_t n_probes);
// Same for an existing model: KD on the hidden path against the teacher.
GradAuditResult audit_model_kd(const HybridModel& model, const TeacherCheckpoint& teacher, std::size_t tokens,
                               std::uint64_t seed, std::size_t n_probes);

// ---- needle in a haystack --------------------------------------------------

// Vocabulary split: two markers, then keys, then values, filler after.
struct NiahTask {
    std::size_t vocab = 0;
    std::size_t n_keys = 0;
    std::size_t n_values = 0;
    TokenId needle_marker() const { return 0; }
    TokenId query_marker() const { return 1; }
    TokenId key(std::size_t i) const { return static_cast<TokenId>(2 + i); }
    TokenId value(std::size_t i) const { return static_cast<TokenId>(2 + n_keys + i); }
    TokenId first_filler() const { return static_cast<TokenId>(2 + n_keys + n_values); }
    void validate() const;
};

// Splits vocab into 1/4 keys, 1/4 values and filler (at least one each).
NiahTask niah_task(std::size_t vocab);

struct NiahExample {
    std::vector<TokenId> tokens;  // ends with [query marker, key]
    TokenId answer = 0;
    std::size_t needle_position = 0;  // index of the queried needle's marker
};

// Sequences of exactly `context` tokens: filler with `n_needles` triples
// [marker, key, value] with distinct keys at random non-overlapping places,
// then a query for one of them. With needle_at_end the queried needle sits
// right before the query.
std::vector<NiahExample> niah_generate(const NiahTask& task, std::size_t context, std::size_t n_needles,
                                       std::size_t count, std::uint64_t seed, bool needle_at_end = false);

using NiahPredictor = std::function<TokenId(const std::vector<TokenId>&)>;
double niah_eval(const NiahPredictor& predict, const std::vector<NiahExample>& examples);
// Greedy next-token prediction of the model at the final position.
double niah_eval(const HybridModel& model, const std::vector<NiahExample>& examples);

struct NiahTrainConfig {
    TrainConfig train;
    std::size_t n_needles = 1;
};

// Cross-entropy on the answer at the final position, fresh examples every
// step.
TrainReport train_niah(HybridModel& model, const NiahTask& task, const NiahTrainConfig& cfg);

}  // namespace upcycle
