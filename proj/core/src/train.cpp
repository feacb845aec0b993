#include "upcycle/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json_io.hpp"
#include "upcycle/numerics.hpp"

namespace upcycle {

using detail::json;

// ---- optimization ------------------------------------------------------------

double Adam::step(HybridModel& model, const HybridModel& grads, double lr, const ParamFilter& trainable) {
    std::vector<std::pair<std::string, const Tensor*>> g;
    for_each_param(grads, [&](const std::string& name, const Tensor& t) {
        if (trainable(name)) g.emplace_back(name, &t);
    });
    double sq = 0;
    for (const auto& [name, t] : g) sq += dot(t->values(), t->values());
    const double norm = std::sqrt(sq);
    const double clip = cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for_each_param(model, [&](const std::string& name, Tensor& p) {
        if (k >= g.size() || g[k].first != name) return;
        const Tensor& grad = *g[k++].second;
        auto [it, fresh] = moments_.try_emplace(name);
        if (fresh) it->second = {Tensor(p.shape()), Tensor(p.shape())};
        Tensor& m = it->second.first;
        Tensor& v = it->second.second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = grad[i] * clip;
            m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        }
    });
    return norm;
}

double cosine_lr(std::size_t step, std::size_t total, double base_lr, double warmup_ratio) {
    if (total == 0) return base_lr;
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total) - 1e-9));
    if (step < warm) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double span = static_cast<double>(std::max<std::size_t>(total - warm, 1));
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- data ----------------------------------------------------------------------

MarkovCorpus::MarkovCorpus(std::size_t vocab, std::uint64_t seed, std::size_t branching)
    : next_(vocab), cdf_(vocab) {
    if (vocab == 0 || branching == 0) throw std::invalid_argument("corpus: vocab and branching must be positive");
    Rng rng(seed);
    for (std::size_t v = 0; v < vocab; ++v) {
        double total = 0;
        for (std::size_t b = 0; b < branching; ++b) {
            next_[v].push_back(static_cast<TokenId>(rng.below(vocab)));
            total += rng.uniform(0.1, 1.0);
            cdf_[v].push_back(total);
        }
        for (double& c : cdf_[v]) c /= total;
    }
}

std::vector<TokenId> MarkovCorpus::sample(std::size_t length, Rng& rng) const {
    std::vector<TokenId> out;
    out.reserve(length);
    if (length == 0) return out;
    out.push_back(static_cast<TokenId>(rng.below(vocab())));
    while (out.size() < length) {
        const auto& cdf = cdf_[static_cast<std::size_t>(out.back())];
        const double u = rng.uniform();
        const std::size_t j = std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(),
                                                     cdf.size() - 1);
        out.push_back(next_[static_cast<std::size_t>(out.back())][j]);
    }
    return out;
}

// ---- training --------------------------------------------------------------

KlPath parse_kl_path(const std::string& name) {
    if (name == "naive") return KlPath::naive;
    if (name == "chunked") return KlPath::chunked;
    if (name == "online") return KlPath::online;
    if (name == "hidden") return KlPath::hidden;
    throw std::invalid_argument("unknown loss path '" + name + "' (expected naive, chunked, online, hidden)");
}

std::string kl_path_name(KlPath p) {
    switch (p) {
        case KlPath::naive: return "naive";
        case KlPath::chunked: return "chunked";
        case KlPath::online: return "online";
        case KlPath::hidden: return "hidden";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (!(lr > 0)) throw std::invalid_argument("train: lr must be positive");
    if (!(warmup_ratio >= 0 && warmup_ratio < 1)) throw std::invalid_argument("train: warmup_ratio must be in [0, 1)");
    if (context == 0 || batch == 0) throw std::invalid_argument("train: context and batch must be positive");
}

double TrainReport::smoothed_reduction(std::size_t window) const {
    if (steps.empty()) return 0;
    const std::size_t w = std::min(window, steps.size());
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < w; ++i) {
        head += steps[i].loss;
        tail += steps[steps.size() - 1 - i].loss;
    }
    return head > 0 ? 1.0 - tail / head : 0.0;
}

std::string TrainReport::json_lines() const {
    std::string out;
    for (const auto& s : steps) {
        out += json{{"stage", stage}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"grad_norm", s.grad_norm}}
                   .dump();
        out += '\n';
    }
    return out;
}

std::string TrainReport::summary_json() const {
    json j = {{"stage", stage},
              {"steps", steps.size()},
              {"wall_seconds", wall_seconds},
              {"peak_elements", peak_elements},
              {"metrics", metrics}};
    if (!steps.empty()) {
        j["first_loss"] = steps.front().loss;
        j["last_loss"] = steps.back().loss;
        j["smoothed_reduction"] = smoothed_reduction();
    }
    return j.dump(2);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool is_embedding(const std::string& name) {
    return name == "embed" || name == "lm_head" || name == "final_norm";
}

void check_student(const HybridModel& s, const TeacherCheckpoint& t) {
    if (s.base.n_layers != t.config.n_layers || s.base.d_model != t.config.d_model) {
        throw std::invalid_argument("student and teacher layer counts or widths differ");
    }
    if (s.base.vocab != t.config.vocab) {
        throw std::invalid_argument("student vocabulary " + std::to_string(s.base.vocab) +
                                    " differs from teacher vocabulary " + std::to_string(t.config.vocab));
    }
}

void scale_grads(HybridModel& g, double s) {
    for_each_param(g, [&](const std::string&, Tensor& t) { scale_inplace(t, s); });
}

// KD loss of one sequence; fills seeds.d_final_hidden and accumulates the
// LM-head gradient.
double kd_sequence(const Tensor& h_s, const HybridModel& student, const TeacherCheckpoint& teacher,
                   const std::vector<TokenId>& tokens, const TrainConfig& cfg, HybridSeeds& seeds,
                   Tensor& d_lm_head, std::size_t& peak) {
    if (cfg.path == KlPath::hidden) {
        const ModelTrace tt = teacher_forward(teacher, tokens, false, false);
        auto r = kl_hidden(h_s, student.lm_head, tt.final_hidden, teacher.lm_head, cfg.loss);
        seeds.d_final_hidden = std::move(r.grad);
        add_inplace(d_lm_head, r.grad_weight);
        peak = std::max(peak, r.peak_elements);
        return r.value;
    }
    const ModelTrace tt = teacher_forward(teacher, tokens, true, false);
    const Tensor z_s = linear(h_s, student.lm_head);
    LossValueAndGrad r;
    switch (cfg.path) {
        case KlPath::naive: r = kl_naive(z_s, *tt.logits, cfg.loss); break;
        case KlPath::chunked: r = kl_chunked(z_s, *tt.logits, cfg.loss); break;
        default: r = kl_online(z_s, *tt.logits, cfg.loss); break;
    }
    seeds.d_final_hidden = linear_backward(h_s, student.lm_head, r.grad, d_lm_head);
    peak = std::max(peak, r.peak_elements);
    return r.value;
}

}  // namespace

TrainReport train_stage1_ild(HybridModel& student, const TeacherCheckpoint& teacher, const MarkovCorpus& data,
                             const TrainConfig& cfg) {
    cfg.validate();
    check_student(student, teacher);
    const auto t0 = Clock::now();
    TrainReport report;
    report.stage = "ild";
    Rng rng(cfg.seed);
    Adam adam(cfg.adam);
    const ParamFilter trainable = [&](const std::string& n) { return cfg.train_embeddings || !is_embedding(n); };
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        HybridModel grads = zeros_like(student);
        double loss = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto tokens = data.sample(cfg.context, rng);
            const ModelTrace tt = teacher_forward(teacher, tokens, false, true);
            HybridTape tape;
            const ModelTrace ts = hybrid_forward(student, tokens, false, true, &tape);
            IldResult ild = ild_loss(ts.hidden_states, ts.mixer_outputs, tt.hidden_states, tt.mixer_outputs);
            HybridSeeds seeds;
            seeds.d_hidden = std::move(ild.d_hidden);
            seeds.d_mixer = std::move(ild.d_mixer);
            hybrid_backward(student, tape, seeds, grads);
            loss += ild.value;
        }
        scale_grads(grads, 1.0 / static_cast<double>(cfg.batch));
        const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
        const double gn = adam.step(student, grads, lr, trainable);
        report.steps.push_back({step, loss / static_cast<double>(cfg.batch), lr, gn});
    }
    report.wall_seconds = seconds_since(t0);
    return report;
}

TrainReport train_stage2_kd(HybridModel& student, const TeacherCheckpoint& teacher, const MarkovCorpus& data,
                            const TrainConfig& cfg) {
    cfg.validate();
    check_student(student, teacher);
    const auto t0 = Clock::now();
    TrainReport report;
    report.stage = "kd-" + kl_path_name(cfg.path);
    Rng rng(cfg.seed);
    Adam adam(cfg.adam);
    const ParamFilter all = [](const std::string&) { return true; };
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        HybridModel grads = zeros_like(student);
        double loss = 0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto tokens = data.sample(cfg.context, rng);
            HybridTape tape;
            const ModelTrace ts = hybrid_forward(student, tokens, false, false, &tape);
            HybridSeeds seeds;
            loss += kd_sequence(ts.final_hidden, student, teacher, tokens, cfg, seeds, grads.lm_head,
                                report.peak_elements);
            hybrid_backward(student, tape, seeds, grads);
        }
        scale_grads(grads, 1.0 / static_cast<double>(cfg.batch));
        const double lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_ratio);
        const double gn = adam.step(student, grads, lr, all);
        report.steps.push_back({step, loss / static_cast<double>(cfg.batch), lr, gn});
    }
    report.wall_seconds = seconds_since(t0);
    return report;
}

KdEval evaluate_kd(const HybridModel& student, const TeacherCheckpoint& teacher,
                   const std::vector<std::vector<TokenId>>& sequences) {
    check_student(student, teacher);
    KdEval e;
    std::size_t positions = 0, agree = 0;
    double kl = 0;
    for (const auto& tokens : sequences) {
        const Tensor zs = *hybrid_forward(student, tokens, true, false).logits;
        const Tensor zt = *teacher_forward(teacher, tokens, true, false).logits;
        kl += kl_naive(zs, zt).value * static_cast<double>(tokens.size());
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto rs = zs.row(t), rt = zt.row(t);
            agree += std::max_element(rs.begin(), rs.end()) - rs.begin() ==
                     std::max_element(rt.begin(), rt.end()) - rt.begin();
        }
        positions += tokens.size();
    }
    if (positions > 0) {
        e.kl = kl / static_cast<double>(positions);
        e.argmax_agreement = static_cast<double>(agree) / static_cast<double>(positions);
    }
    return e;
}

namespace {

template <typename M>
std::uint64_t hash_params(const M& m) {
    std::uint64_t h = 1469598103934665603ULL;
    for_each_param(m, [&](const std::string& name, const Tensor& t) {
        for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        for (double v : t.values()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            for (int i = 0; i < 8; ++i) h = (h ^ ((bits >> (8 * i)) & 0xff)) * 1099511628211ULL;
        }
    });
    return h;
}

}  // namespace

std::uint64_t weights_hash(const TeacherCheckpoint& t) { return hash_params(t); }
std::uint64_t weights_hash(const HybridModel& m) { return hash_params(m); }

// ---- gradient audit ----------------------------------------------------------

GradAuditResult grad_audit(const std::vector<ParamProbe>& params, const std::function<double()>& loss,
                           std::size_t n_probes, std::uint64_t seed, double rel_step, double abs_floor) {
    if (n_probes == 0) throw std::invalid_argument("grad_audit: need at least one probe");
    std::size_t total = 0;
    for (const auto& p : params) total += p.value->size();
    if (total == 0) throw std::invalid_argument("grad_audit: no parameters to probe");
    GradAuditResult r;
    Rng rng(seed);
    for (std::size_t k = 0; k < n_probes; ++k) {
        // uniform over scalars, not over tensors
        std::size_t flat = rng.below(total), which = 0;
        while (flat >= params[which].value->size()) flat -= params[which++].value->size();
        const ParamProbe& p = params[which];
        double& slot = (*p.value)[flat];
        const double keep = slot;
        const double h = rel_step * std::max(std::abs(keep), 1.0);
        slot = keep + h;
        const double up = loss();
        slot = keep - h;
        const double dn = loss();
        slot = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = (*p.grad)[flat];
        const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), abs_floor});
        ++r.probes;
        if (err >= r.max_rel_error) {
            r.max_rel_error = err;
            std::ostringstream os;
            os << p.name << "[" << flat << "] fd=" << fd << " an=" << an;
            r.worst = os.str();
        }
    }
    return r;
}

namespace {

TransformerConfig audit_config() {
    TransformerConfig c;
    c.d_model = 32;
    c.n_layers = 1;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.vocab = 24;
    c.mlp_hidden = 48;
    return c;
}

Tensor random_tensor(Rng& rng, Shape shape, double scale) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-scale, scale);
    return t;
}

template <typename W>
std::vector<ParamProbe> probes_for(W& weights, W& grads, const std::string& prefix) {
    std::vector<ParamProbe> out;
    std::vector<const Tensor*> g;
    for_each_param(grads, prefix, [&](const std::string&, Tensor& t) { g.push_back(&t); });
    std::size_t k = 0;
    for_each_param(weights, prefix, [&](const std::string& name, Tensor& t) { out.push_back({name, &t, g[k++]}); });
    return out;
}

}  // namespace

GradAuditResult audit_target(AuditTarget target, std::uint64_t seed, std::size_t n_probes) {
    Rng rng(seed);
    const TransformerConfig c = audit_config();
    const std::size_t T = 12, V = c.vocab, d = c.d_model;
    switch (target) {
        case AuditTarget::kl_naive: {
            Tensor zs = random_tensor(rng, {T, V}, 2.0);
            const Tensor zt = random_tensor(rng, {T, V}, 2.0);
            const auto r = kl_naive(zs, zt);
            return grad_audit({{"z_s", &zs, &r.grad}}, [&] { return kl_naive(zs, zt).value; }, n_probes, seed + 1);
        }
        case AuditTarget::fused_linear_ce: {
            Tensor h = random_tensor(rng, {T, d}, 1.0);
            Tensor w = random_tensor(rng, {V, d}, 0.5);
            std::vector<TokenId> y(T);
            for (auto& t : y) t = static_cast<TokenId>(rng.below(V));
            const LossConfig lc{.kl_chunk = 5};
            const auto r = fused_linear_ce(h, w, y, lc);
            return grad_audit({{"h", &h, &r.grad}, {"w", &w, &r.grad_weight}},
                              [&] { return fused_linear_ce(h, w, y, lc).value; }, n_probes, seed + 1);
        }
        case AuditTarget::mla_block:
        case AuditTarget::gdn_block: {
            const TeacherCheckpoint teacher = gen_toy_teacher(c, seed);
            const Tensor x = random_tensor(rng, {T, d}, 1.0);
            const Tensor head = random_tensor(rng, {V, d}, 0.5);
            const Tensor zt = random_tensor(rng, {T, V}, 1.0);
            if (target == AuditTarget::mla_block) {
                MlaConfig mc = default_mla_config(c, 12);
                mc.gate = true;
                MlaBlockWeights w = init_mla_from_teacher(teacher.layers[0].attn, c, mc);
                w.wgate = random_tensor(rng, w.wgate.shape(), 0.2);
                MlaBlockWeights g = mla_skeleton(mc);
                MlaTape tape;
                const Tensor y = mla_forward(w, mc, x, nullptr, 0, &tape);
                const auto r = kl_naive(linear(y, head), zt);
                mla_backward(w, mc, tape, matmul(r.grad, head), g);
                return grad_audit(probes_for(w, g, "mla."),
                                  [&] { return kl_naive(linear(mla_forward(w, mc, x), head), zt).value; }, n_probes,
                                  seed + 1);
            }
            const GdnConfig gc = default_gdn_config(d, 2);
            GdnBlockWeights w = init_gdn_from_teacher(teacher.layers[0].attn, c, gc, seed);
            GdnBlockWeights g = gdn_skeleton(gc);
            GdnTape tape;
            const Tensor y = gdn_forward(w, gc, x, nullptr, GdnMode::sequential, &tape);
            const auto r = kl_naive(linear(y, head), zt);
            gdn_backward(w, gc, tape, matmul(r.grad, head), g);
            return grad_audit(probes_for(w, g, "gdn."),
                              [&] {
                                  return kl_naive(linear(gdn_forward(w, gc, x, nullptr, GdnMode::sequential), head),
                                                  zt)
                                      .value;
                              },
                              n_probes, seed + 1);
        }
        case AuditTarget::hybrid_model: {
            TransformerConfig hc = c;
            hc.n_layers = 2;
            const TeacherCheckpoint teacher = gen_toy_teacher(hc, seed);
            const HybridModel model = convert_teacher(teacher, default_mla_config(hc, 12), default_gdn_config(d, 2),
                                                      HybridLayout{2, {1}, "gdn"}, seed);
            return audit_model_kd(model, gen_toy_teacher(hc, seed + 7), T, seed, n_probes);
        }
    }
    throw std::invalid_argument("unknown audit target");
}

GradAuditResult audit_model_kd(const HybridModel& model, const TeacherCheckpoint& teacher, std::size_t tokens,
                               std::uint64_t seed, std::size_t n_probes) {
    check_student(model, teacher);
    Rng rng(seed);
    std::vector<TokenId> seq(tokens);
    for (auto& t : seq) t = static_cast<TokenId>(rng.below(model.base.vocab));
    HybridModel m = model;
    const Tensor h_t = teacher_forward(teacher, seq, false, false).final_hidden;
    const LossConfig lc{.kl_chunk = 5};
    auto loss = [&] {
        const ModelTrace ts = hybrid_forward(m, seq, false, false, nullptr, GdnMode::sequential);
        return kl_hidden(ts.final_hidden, m.lm_head, h_t, teacher.lm_head, lc).value;
    };
    HybridTape tape;
    const ModelTrace ts = hybrid_forward(m, seq, false, false, &tape);
    auto r = kl_hidden(ts.final_hidden, m.lm_head, h_t, teacher.lm_head, lc);
    HybridModel g = zeros_like(m);
    g.lm_head = r.grad_weight;
    HybridSeeds seeds;
    seeds.d_final_hidden = std::move(r.grad);
    hybrid_backward(m, tape, seeds, g);
    std::vector<ParamProbe> probes;
    std::vector<const Tensor*> grads;
    for_each_param(g, [&](const std::string&, const Tensor& t) { grads.push_back(&t); });
    std::size_t k = 0;
    for_each_param(m, [&](const std::string& name, Tensor& t) { probes.push_back({name, &t, grads[k++]}); });
    return grad_audit(probes, loss, n_probes, seed + 1);
}

// ---- needle in a haystack --------------------------------------------------

void NiahTask::validate() const {
    if (n_keys == 0 || n_values == 0 || vocab < 3 + n_keys + n_values) {
        throw std::invalid_argument("niah: vocabulary of " + std::to_string(vocab) +
                                    " cannot hold markers, keys, values and filler");
    }
}

NiahTask niah_task(std::size_t vocab) {
    NiahTask t{vocab, std::max<std::size_t>(1, vocab / 4), std::max<std::size_t>(1, vocab / 4)};
    t.validate();
    return t;
}

std::vector<NiahExample> niah_generate(const NiahTask& task, std::size_t context, std::size_t n_needles,
                                       std::size_t count, std::uint64_t seed, bool needle_at_end) {
    task.validate();
    if (n_needles == 0 || n_needles > task.n_keys) {
        throw std::invalid_argument("niah: needle count must be in [1, " + std::to_string(task.n_keys) + "]");
    }
    if (context < 3 * n_needles + 2) {
        throw std::invalid_argument("niah: context " + std::to_string(context) + " cannot hold " +
                                    std::to_string(n_needles) + " needles and a query");
    }
    Rng rng(seed);
    const std::size_t n_filler = task.vocab - static_cast<std::size_t>(task.first_filler());
    const std::size_t slots = context - 2;  // everything before the query
    std::vector<NiahExample> out;
    for (std::size_t e = 0; e < count; ++e) {
        NiahExample ex;
        ex.tokens.resize(context);
        for (std::size_t i = 0; i < slots; ++i) {
            ex.tokens[i] = static_cast<TokenId>(task.first_filler() + static_cast<TokenId>(rng.below(n_filler)));
        }
        // distinct keys
        std::vector<std::size_t> keys(task.n_keys);
        for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i;
        for (std::size_t i = 0; i < n_needles; ++i) std::swap(keys[i], keys[i + rng.below(keys.size() - i)]);
        // non-overlapping starts: choose gaps in a haystack with the needles removed
        const std::size_t free = slots - 3 * n_needles;
        std::vector<std::size_t> starts(n_needles);
        for (auto& s : starts) s = rng.below(free + 1);
        std::sort(starts.begin(), starts.end());
        for (std::size_t i = 0; i < n_needles; ++i) starts[i] += 3 * i;
        const std::size_t queried = rng.below(n_needles);
        if (needle_at_end) {
            // queried needle occupies the last triple before the query
            for (std::size_t i = 0; i < n_needles; ++i) starts[i] = slots - 3 * (n_needles - i);
            std::swap(keys[queried], keys[n_needles - 1]);
        }
        const std::size_t q = needle_at_end ? n_needles - 1 : queried;
        std::vector<TokenId> values(n_needles);
        for (std::size_t i = 0; i < n_needles; ++i) {
            values[i] = task.value(rng.below(task.n_values));
            ex.tokens[starts[i]] = task.needle_marker();
            ex.tokens[starts[i] + 1] = task.key(keys[i]);
            ex.tokens[starts[i] + 2] = values[i];
        }
        ex.tokens[context - 2] = task.query_marker();
        ex.tokens[context - 1] = task.key(keys[q]);
        ex.answer = values[q];
        ex.needle_position = starts[q];
        out.push_back(std::move(ex));
    }
    return out;
}

double niah_eval(const NiahPredictor& predict, const std::vector<NiahExample>& examples) {
    if (examples.empty()) return 0;
    std::size_t hits = 0;
    for (const auto& ex : examples) hits += predict(ex.tokens) == ex.answer;
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

double niah_eval(const HybridModel& model, const std::vector<NiahExample>& examples) {
    return niah_eval(
        [&](const std::vector<TokenId>& tokens) {
            DecodeSession s(model);
            const Tensor h = s.feed(tokens);
            const auto last = h.row(h.rows() - 1);
            TokenId best = 0;
            double best_v = -1e300;
            for (std::size_t v = 0; v < model.base.vocab; ++v) {
                const double z = dot(model.lm_head.row(v), last);
                if (z > best_v) {
                    best_v = z;
                    best = static_cast<TokenId>(v);
                }
            }
            return best;
        },
        examples);
}

TrainReport train_niah(HybridModel& model, const NiahTask& task, const NiahTrainConfig& cfg) {
    const TrainConfig& tc = cfg.train;
    tc.validate();
    if (model.base.vocab != task.vocab) throw std::invalid_argument("niah: model vocabulary differs from the task");
    const auto t0 = Clock::now();
    TrainReport report;
    report.stage = "niah";
    Adam adam(tc.adam);
    const ParamFilter all = [](const std::string&) { return true; };
    const std::size_t d = model.base.d_model;
    for (std::size_t step = 0; step < tc.steps; ++step) {
        const auto batch = niah_generate(task, tc.context, cfg.n_needles, tc.batch, tc.seed * 1000003 + step);
        HybridModel grads = zeros_like(model);
        double loss = 0;
        for (const auto& ex : batch) {
            HybridTape tape;
            const ModelTrace tr = hybrid_forward(model, ex.tokens, false, false, &tape);
            const std::size_t T = ex.tokens.size();
            Tensor last({1, d});
            std::copy_n(tr.final_hidden.row(T - 1).begin(), d, last.data());
            auto r = fused_linear_ce(last, model.lm_head, {ex.answer}, tc.loss);
            add_inplace(grads.lm_head, r.grad_weight);
            HybridSeeds seeds;
            seeds.d_final_hidden = Tensor({T, d});
            std::copy_n(r.grad.data(), d, seeds.d_final_hidden.row(T - 1).begin());
            hybrid_backward(model, tape, seeds, grads);
            loss += r.value;
        }
        scale_grads(grads, 1.0 / static_cast<double>(batch.size()));
        const double lr = cosine_lr(step, tc.steps, tc.lr, tc.warmup_ratio);
        const double gn = adam.step(model, grads, lr, all);
        report.steps.push_back({step, loss / static_cast<double>(batch.size()), lr, gn});
    }
    report.wall_seconds = seconds_since(t0);
    return report;
}

}  // namespace upcycle
