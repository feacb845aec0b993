// upcycle: convert, assemble, verify, account for and train hybrid
// MLA + Gated DeltaNet students of a GQA teacher.

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "upcycle/hybrid.hpp"
#include "upcycle/train.hpp"
#include "upcycle/verify.hpp"

using namespace upcycle;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2 };

struct Style {
    bool color = false;
    std::string pass() const { return color ? "\033[32mPASS\033[0m" : "PASS"; }
    std::string fail() const { return color ? "\033[31mFAIL\033[0m" : "FAIL"; }
};

Style detect_style() {
    const char* no_color = std::getenv("NO_COLOR");
    return Style{isatty(STDOUT_FILENO) && !(no_color && *no_color)};
}

// Raised when a command ran but its checks did not hold.
struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

void print_warnings(const LoadReport& r) {
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

GdnConfig gdn_config_for(const TransformerConfig& t, const std::string& path, std::size_t heads) {
    if (!path.empty()) return gdn_config_from_json(read_text_file(path), t.d_model);
    return default_gdn_config(t.d_model, heads);
}

json kv_json(const KvCacheReport& r) {
    return {{"teacher_per_token", r.teacher_per_token},
            {"hybrid_per_token", r.hybrid_per_token},
            {"ratio", r.ratio},
            {"percent", r.percent()}};
}

json plan_json(const MemoryPlan& p) {
    json rows = json::array(), savings = json::array();
    for (const auto& r : p.rows) {
        rows.push_back({{"name", r.name},
                        {"elements", r.elements},
                        {"bytes", r.bytes},
                        {"removed_by", r.removed_by ? json(technique_name(*r.removed_by)) : json(nullptr)}});
    }
    for (const auto& s : p.savings) {
        savings.push_back({{"technique", technique_name(s.technique)},
                           {"saves", s.saves},
                           {"multiple_of_TxV", s.multiple},
                           {"bytes", s.bytes}});
    }
    return {{"tokens", p.tokens},
            {"vocab", p.vocab},
            {"bytes_per_element", kBytesPerElement},
            {"logit_tensor_bytes", p.logit_tensor_bytes},
            {"logit_tensor_display", approx_bytes(p.logit_tensor_bytes)},
            {"rows", rows},
            {"savings", savings},
            {"baseline_bytes", p.baseline_bytes},
            {"residual_bytes", p.residual_bytes}};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Convert a GQA teacher into a hybrid MLA + Gated DeltaNet student, verify it, "
                 "report its cache and distillation memory, and train it."};
    app.require_subcommand(1);
    bool as_json = false;
    app.add_flag("--json", as_json, "Emit one JSON document on stdout");
    const Style style = detect_style();
    json result;
    std::vector<std::string> lines;  // human output
    bool checks_failed = false;

    // gen-teacher
    std::string g_config, g_out;
    std::uint64_t g_seed = 0;
    auto* gen = app.add_subcommand("gen-teacher", "Generate a random toy teacher checkpoint");
    gen->add_option("--config", g_config, "Teacher config JSON")->required()->check(CLI::ExistingFile);
    gen->add_option("--seed", g_seed, "Random seed");
    gen->add_option("--out", g_out, "Output checkpoint")->required();
    gen->fallthrough();
    gen->callback([&] {
        const auto cfg = load_transformer_config(g_config);
        save_teacher(gen_toy_teacher(cfg, g_seed), g_out);
        result = {{"out", g_out}, {"seed", g_seed}, {"layers", cfg.n_layers}, {"d_model", cfg.d_model}};
        lines.push_back("wrote teacher " + g_out + " (" + std::to_string(cfg.n_layers) + " layers, d=" +
                        std::to_string(cfg.d_model) + ", seed " + std::to_string(g_seed) + ")");
    });

    // convert-mla
    std::string m_teacher, m_config, m_out;
    auto* cmla = app.add_subcommand("convert-mla", "SVD-initialize an all-MLA student from a teacher");
    cmla->add_option("--teacher", m_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    cmla->add_option("--mla-config", m_config, "MLA config JSON")->required()->check(CLI::ExistingFile);
    cmla->add_option("--out", m_out, "Output checkpoint")->required();
    cmla->fallthrough();
    cmla->callback([&] {
        LoadReport rep;
        const auto teacher = load_teacher(m_teacher, &rep);
        print_warnings(rep);
        const auto mla = mla_config_from_json(read_text_file(m_config), teacher.config);
        const auto layout = HybridLayout::all_mla(teacher.config.n_layers);
        const auto model = convert_teacher(teacher, mla, default_gdn_config(teacher.config.d_model), layout);
        save_hybrid(model, m_out);
        result = {{"out", m_out},
                  {"layers", teacher.config.n_layers},
                  {"cache_per_token", mla.cache_elements_per_token()},
                  {"params", param_count(model)}};
        lines.push_back("wrote all-MLA student " + m_out + " (r_q=" + std::to_string(mla.r_q) +
                        ", r_kv=" + std::to_string(mla.r_kv) + ", d_qk_rope=" + std::to_string(mla.d_qk_rope) +
                        ", " + std::to_string(param_count(model)) + " params)");
    });

    // convert-gdn
    std::string d_teacher, d_config, d_out;
    std::size_t d_heads = 0;
    std::uint64_t d_seed = 0;
    auto* cgdn = app.add_subcommand("convert-gdn", "Initialize an all-GDN student from a teacher");
    cgdn->add_option("--teacher", d_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    cgdn->add_option("--gdn-config", d_config, "Optional GDN config JSON")->check(CLI::ExistingFile);
    cgdn->add_option("--heads", d_heads, "GDN head count (0: default rule)");
    cgdn->add_option("--seed", d_seed, "Seed for parameters not copied from the teacher");
    cgdn->add_option("--out", d_out, "Output checkpoint")->required();
    cgdn->fallthrough();
    cgdn->callback([&] {
        LoadReport rep;
        const auto teacher = load_teacher(d_teacher, &rep);
        print_warnings(rep);
        const auto gdn = gdn_config_for(teacher.config, d_config, d_heads);
        const auto model = convert_teacher(teacher, MlaConfig{}, gdn, HybridLayout::all_linear(teacher.config.n_layers),
                                           d_seed);
        save_hybrid(model, d_out);
        result = {{"out", d_out}, {"heads", gdn.n_heads}, {"d_k", gdn.d_k}, {"d_v", gdn.d_v},
                  {"params", param_count(model)}};
        lines.push_back("wrote all-GDN student " + d_out + " (H=" + std::to_string(gdn.n_heads) + ", d_k=" +
                        std::to_string(gdn.d_k) + ", d_v=" + std::to_string(gdn.d_v) + ", " +
                        std::to_string(param_count(model)) + " params)");
    });

    // assemble
    std::string a_mla, a_gdn, a_layout, a_out, a_donor = "mla";
    auto* asmb = app.add_subcommand("assemble", "Assemble a hybrid from pure MLA and GDN students");
    asmb->add_option("--mla", a_mla, "All-MLA student checkpoint")->required()->check(CLI::ExistingFile);
    asmb->add_option("--gdn", a_gdn, "All-GDN student checkpoint")->required()->check(CLI::ExistingFile);
    asmb->add_option("--layout", a_layout, "Layout JSON")->required()->check(CLI::ExistingFile);
    asmb->add_option("--donor", a_donor, "Checkpoint supplying embeddings, final norm and LM head")
        ->check(CLI::IsMember({"mla", "gdn"}));
    asmb->add_option("--out", a_out, "Output checkpoint")->required();
    asmb->fallthrough();
    asmb->callback([&] {
        LoadReport r1, r2;
        const auto pm = load_hybrid(a_mla, &r1);
        const auto pg = load_hybrid(a_gdn, &r2);
        print_warnings(r1);
        print_warnings(r2);
        const auto layout = load_layout(a_layout);
        const auto h = assemble_hybrid(pm, pg, layout, a_donor == "gdn" ? Donor::gdn : Donor::mla);
        save_hybrid(h, a_out);
        result = {{"out", a_out}, {"mla_indices", layout.mla_indices}, {"n_layers", layout.n_layers},
                  {"params", param_count(h)}};
        lines.push_back("wrote hybrid " + a_out + " (" + std::to_string(layout.n_mla()) + " MLA + " +
                        std::to_string(layout.n_layers - layout.n_mla()) + " GDN layers)");
    });

    // verify
    std::string v_hybrid, v_teacher;
    VerifyOptions v_opts;
    auto* ver = app.add_subcommand("verify", "Run the invariant suite on a student against its teacher");
    ver->add_option("--hybrid", v_hybrid, "Student checkpoint")->required()->check(CLI::ExistingFile);
    ver->add_option("--teacher", v_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    ver->add_option("--seed", v_opts.seed, "Seed for random inputs");
    ver->add_option("--tokens", v_opts.tokens, "Prefill length");
    ver->add_option("--probes", v_opts.probes, "Finite-difference probes");
    ver->fallthrough();
    ver->callback([&] {
        LoadReport r1, r2;
        const auto h = load_hybrid(v_hybrid, &r1);
        const auto t = load_teacher(v_teacher, &r2);
        print_warnings(r1);
        print_warnings(r2);
        const auto checks = verify_suite(h, t, v_opts);
        json arr = json::array();
        for (const auto& c : checks) {
            arr.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value}, {"tolerance", c.tolerance},
                           {"detail", c.detail}});
            char buf[256];
            std::snprintf(buf, sizeof buf, "%-28s %-10s %s", c.name.c_str(), sci(c.value).c_str(),
                          c.detail.c_str());
            lines.push_back((c.passed ? style.pass() : style.fail()) + "  " + buf);
            checks_failed |= !c.passed;
        }
        result = {{"checks", arr}, {"all_passed", !checks_failed}};
    });

    // kv-report
    std::string k_layout, k_teacher, k_mla;
    auto* kv = app.add_subcommand("kv-report", "Per-token KV cache of a layout relative to the teacher");
    kv->add_option("--layout", k_layout, "Layout JSON")->required()->check(CLI::ExistingFile);
    kv->add_option("--teacher-config", k_teacher, "Teacher config JSON")->required()->check(CLI::ExistingFile);
    kv->add_option("--mla-config", k_mla, "MLA config JSON")->required()->check(CLI::ExistingFile);
    kv->fallthrough();
    kv->callback([&] {
        const auto tcfg = load_transformer_config(k_teacher);
        const auto layout = load_layout(k_layout);
        if (layout.n_layers != tcfg.n_layers) {
            throw std::invalid_argument("layout has " + std::to_string(layout.n_layers) +
                                        " layers, teacher config has " + std::to_string(tcfg.n_layers));
        }
        const auto mla = mla_config_from_json(read_text_file(k_mla), tcfg);
        const auto r = kv_cache_report(layout, tcfg, mla);
        result = kv_json(r);
        result["mla_layers"] = layout.n_mla();
        result["n_layers"] = layout.n_layers;
        lines.push_back("teacher KV cache   " + std::to_string(r.teacher_per_token) + " elements/token (" +
                        std::to_string(tcfg.n_layers) + " x 2 x " + std::to_string(tcfg.n_kv_heads) + " x " +
                        std::to_string(tcfg.head_dim) + ")");
        lines.push_back("hybrid KV cache    " + std::to_string(r.hybrid_per_token) + " elements/token (" +
                        std::to_string(layout.n_mla()) + " MLA x " +
                        std::to_string(mla.cache_elements_per_token()) + ")");
        lines.push_back("ratio              " + r.percent());
    });

    // mem-plan
    std::size_t p_tokens = 0, p_vocab = 0;
    std::string p_techniques;
    auto* mem = app.add_subcommand("mem-plan", "bf16 logit-side memory of one distillation step");
    mem->add_option("--tokens", p_tokens, "Sequence length T")->required()->check(CLI::PositiveNumber);
    mem->add_option("--vocab", p_vocab, "Vocabulary size V")->required()->check(CLI::PositiveNumber);
    mem->add_option("--techniques", p_techniques,
                    "Comma-separated: fused-ce (chunked-ce), chunked-kl, online-kl, hidden-kl");
    mem->fallthrough();
    mem->callback([&] {
        std::set<MemoryTechnique> set;
        for (const auto& t : split_csv(p_techniques)) set.insert(parse_memory_technique(t));
        const auto p = memory_plan(p_tokens, p_vocab, set);
        result = plan_json(p);
        lines.push_back("per logit tensor (T x V x 2 bytes): " + group_thousands(p.logit_tensor_bytes) +
                        " bytes " + approx_bytes(p.logit_tensor_bytes));
        for (const auto& r : p.rows) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "  %-16s %20s bytes  %s", r.name.c_str(), group_thousands(r.bytes).c_str(),
                          r.removed_by ? ("removed by " + technique_name(*r.removed_by)).c_str() : "live");
            lines.push_back(buf);
        }
        for (const auto& s : p.savings) {
            lines.push_back("  " + technique_name(s.technique) + " saves " + s.saves + " = " +
                            group_thousands(s.bytes) + " bytes");
        }
        lines.push_back("baseline " + group_thousands(p.baseline_bytes) + " bytes " +
                        approx_bytes(p.baseline_bytes) + ", residual " + group_thousands(p.residual_bytes) +
                        " bytes " + approx_bytes(p.residual_bytes));
    });

    // train
    int t_stage = 1;
    std::string t_teacher, t_student, t_out, t_log, t_path = "naive";
    TrainConfig tc;
    std::uint64_t t_corpus = 1;
    std::size_t t_eval = 8;
    auto* tr = app.add_subcommand("train", "Stage I (ILD) or Stage II (KD) training on synthetic text");
    tr->add_option("--stage", t_stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
    tr->add_option("--teacher", t_teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--student", t_student, "Student checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", t_out, "Trained student checkpoint")->required();
    tr->add_option("--steps", tc.steps, "Optimizer steps");
    tr->add_option("--context", tc.context, "Tokens per sequence");
    tr->add_option("--batch", tc.batch, "Sequences per step");
    tr->add_option("--lr", tc.lr, "Peak learning rate");
    tr->add_option("--warmup", tc.warmup_ratio, "Warmup ratio");
    tr->add_option("--seed", tc.seed, "Sampling seed");
    tr->add_option("--corpus-seed", t_corpus, "Seed of the synthetic bigram corpus");
    tr->add_option("--loss-path", t_path, "Stage II KL path")
        ->check(CLI::IsMember({"naive", "chunked", "online", "hidden"}));
    tr->add_option("--kl-chunk", tc.loss.kl_chunk, "Token rows per chunk (chunked/hidden paths)");
    tr->add_option("--vocab-tile", tc.loss.vocab_tile, "Vocabulary tile (online path)");
    tr->add_flag("--reverse-kl", tc.loss.reverse, "Use KL(p_t || p_s)");
    tr->add_flag("--train-embeddings", tc.train_embeddings, "Stage I: also train embeddings and LM head");
    tr->add_option("--clip", tc.adam.clip_norm, "Global gradient-norm clip (0 disables)");
    tr->add_option("--eval-sequences", t_eval, "Held-out sequences for the Stage II evaluation");
    tr->add_option("--log", t_log, "Write per-step JSON lines here");
    tr->fallthrough();
    tr->callback([&] {
        LoadReport r1, r2;
        const auto teacher = load_teacher(t_teacher, &r1);
        auto student = load_hybrid(t_student, &r2);
        print_warnings(r1);
        print_warnings(r2);
        tc.path = parse_kl_path(t_path);
        const MarkovCorpus data(teacher.config.vocab, t_corpus);
        const std::uint64_t teacher_hash = weights_hash(teacher);
        TrainReport report;
        if (t_stage == 1) {
            report = train_stage1_ild(student, teacher, data, tc);
            report.metrics["smoothed_reduction"] = report.smoothed_reduction();
        } else {
            Rng rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
            std::vector<std::vector<TokenId>> held;
            for (std::size_t i = 0; i < t_eval; ++i) held.push_back(data.sample(tc.context, rng));
            const auto before = evaluate_kd(student, teacher, held);
            report = train_stage2_kd(student, teacher, data, tc);
            const auto after = evaluate_kd(student, teacher, held);
            report.metrics["eval_kl_before"] = before.kl;
            report.metrics["eval_kl_after"] = after.kl;
            report.metrics["eval_kl_reduction"] = before.kl > 0 ? 1 - after.kl / before.kl : 0;
            report.metrics["argmax_agreement_before"] = before.argmax_agreement;
            report.metrics["argmax_agreement_after"] = after.argmax_agreement;
        }
        if (weights_hash(teacher) != teacher_hash) throw std::runtime_error("teacher weights changed during training");
        save_hybrid(student, t_out);
        if (!t_log.empty()) write_text(t_log, report.json_lines());
        result = json::parse(report.summary_json());
        result["out"] = t_out;
        lines.push_back("stage " + report.stage + ": " + std::to_string(report.steps.size()) + " steps in " +
                        fixed(report.wall_seconds, 1) + " s");
        if (!report.steps.empty()) {
            lines.push_back("loss " + sci(report.steps.front().loss) + " -> " + sci(report.steps.back().loss) +
                            " (smoothed reduction " + fixed(100 * report.smoothed_reduction(), 1) + "%)");
        }
        for (const auto& [k, v] : report.metrics) lines.push_back(k + " = " + sci(v));
        lines.push_back("wrote " + t_out);
    });

    // eval-niah
    std::string n_model, n_out;
    std::size_t n_context = 128, n_needles = 1, n_samples = 200;
    std::uint64_t n_seed = 0;
    NiahTrainConfig nt;
    nt.train.steps = 0;
    nt.train.batch = 8;
    nt.train.lr = 3e-3;
    auto* niah = app.add_subcommand("eval-niah", "Needle-in-a-haystack retrieval accuracy (optionally train first)");
    niah->add_option("--model", n_model, "Student checkpoint")->required()->check(CLI::ExistingFile);
    niah->add_option("--context", n_context, "Sequence length");
    niah->add_option("--needles", n_needles, "Needles per sequence");
    niah->add_option("--samples", n_samples, "Evaluation sequences");
    niah->add_option("--seed", n_seed, "Evaluation seed");
    niah->add_option("--train-steps", nt.train.steps, "Train on fresh recall data first");
    niah->add_option("--batch", nt.train.batch, "Training sequences per step");
    niah->add_option("--lr", nt.train.lr, "Training peak learning rate");
    niah->add_option("--out", n_out, "Write the trained model here");
    niah->fallthrough();
    niah->callback([&] {
        LoadReport rep;
        auto model = load_hybrid(n_model, &rep);
        print_warnings(rep);
        const auto task = niah_task(model.base.vocab);
        const auto eval = niah_generate(task, n_context, n_needles, n_samples, n_seed + 0x5eed);
        result = {{"context", n_context}, {"needles", n_needles}, {"samples", n_samples},
                  {"chance", 1.0 / static_cast<double>(task.n_values)}};
        if (nt.train.steps > 0) {
            nt.train.context = n_context;
            nt.n_needles = n_needles;
            nt.train.seed = n_seed;
            const auto report = train_niah(model, task, nt);
            result["train_steps"] = report.steps.size();
            result["train_seconds"] = report.wall_seconds;
            result["final_train_loss"] = report.steps.back().loss;
            lines.push_back("trained " + std::to_string(report.steps.size()) + " steps in " +
                            fixed(report.wall_seconds, 1) + " s, final loss " + sci(report.steps.back().loss));
            if (!n_out.empty()) save_hybrid(model, n_out);
        }
        const double acc = niah_eval(model, eval);
        result["accuracy"] = acc;
        lines.push_back("context " + std::to_string(n_context) + ", " + std::to_string(n_needles) +
                        " needle(s): accuracy " + fixed(100 * acc, 1) + "% over " + std::to_string(n_samples) +
                        " sequences (chance " + fixed(100.0 / static_cast<double>(task.n_values), 1) + "%)");
    });

    auto emit_error = [&](const std::string& msg, int code) {
        std::cerr << "error: " << msg << "\n";
        if (as_json) std::cout << json{{"ok", false}, {"error", msg}, {"exit_code", code}}.dump(2) << "\n";
        return code;
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return emit_error(e.what(), kValidation);
    } catch (const std::invalid_argument& e) {
        return emit_error(e.what(), kValidation);
    } catch (const std::out_of_range& e) {
        return emit_error(e.what(), kValidation);
    } catch (const std::exception& e) {
        return emit_error(e.what(), kRuntime);
    }

    if (as_json) {
        result["ok"] = !checks_failed;
        std::cout << result.dump(2) << "\n";
    } else {
        for (const auto& l : lines) std::cout << l << "\n";
    }
    if (checks_failed) {
        std::cerr << "error: verification failed\n";
        return kValidation;
    }
    return kOk;
}
