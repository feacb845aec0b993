#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "upcycle/tensor.hpp"

namespace upcycle {

using TokenId = std::int32_t;

// Base GQA-Transformer hyperparameters.
struct TransformerConfig {
    std::size_t d_model = 0;
    std::size_t n_layers = 0;
    std::size_t n_q_heads = 0;
    std::size_t n_kv_heads = 0;
    std::size_t head_dim = 0;
    std::size_t vocab = 0;
    std::size_t mlp_hidden = 0;
    double rope_theta = 10000.0;
    double eps = 1e-5;
    std::size_t max_position = 2048;  // original training context
    bool qk_norm = false;             // per-head RMSNorm on Q and K after projection

    std::size_t group() const { return n_q_heads / n_kv_heads; }
    void validate() const;
    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

using ParamVisitor = std::function<void(const std::string& name, Tensor& value)>;
using ConstParamVisitor = std::function<void(const std::string& name, const Tensor& value)>;

struct MlpWeights {
    Tensor gate;  // mlp_hidden x d
    Tensor up;    // mlp_hidden x d
    Tensor down;  // d x mlp_hidden
};

struct AttentionWeights {
    Tensor wq;      // H_q d_h x d
    Tensor wk;      // H_kv d_h x d
    Tensor wv;      // H_kv d_h x d
    Tensor wo;      // d x H_q d_h
    Tensor q_norm;  // d_h, only with qk_norm
    Tensor k_norm;  // d_h, only with qk_norm
};

struct TeacherLayer {
    AttentionWeights attn;
    MlpWeights mlp;
    Tensor attn_norm;
    Tensor mlp_norm;
};

struct TeacherCheckpoint {
    TransformerConfig config;
    std::vector<TeacherLayer> layers;
    Tensor embed;       // V x d
    Tensor final_norm;  // d
    Tensor lm_head;     // V x d
};

// Allocates zero tensors of the right shapes.
TeacherCheckpoint teacher_skeleton(const TransformerConfig& config);

// Visits every parameter in canonical order with its container name
// (`embed`, `layers.{i}.attn.wq`, ...).
void for_each_param(TeacherCheckpoint& ckpt, const ParamVisitor& fn);
void for_each_param(const TeacherCheckpoint& ckpt, const ConstParamVisitor& fn);

bool operator==(const TeacherCheckpoint& a, const TeacherCheckpoint& b);

// Deterministic uniform generator: mt19937_64 draws mapped to [0, 1) with
// 53-bit resolution.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    double uniform();                     // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    double normal();
    std::size_t below(std::size_t n);      // [0, n)
    std::uint64_t next();

private:
    std::mt19937_64 engine_;
};

// Fills matrices with U[-s, s), s = 1/sqrt(fan_in) (fan_in = columns;
// embeddings use s = 1), norm gains with 1. Values are rounded to binary32
// so checkpoints round-trip bit-exactly.
TeacherCheckpoint gen_toy_teacher(const TransformerConfig& config, std::uint64_t seed);

// ---- TensorContainer ------------------------------------------------------
//
// Layout: u64 little-endian header length N, N bytes of UTF-8 JSON (padded
// with spaces to a multiple of 8), then the payload. The header maps each
// tensor name to {"dtype": "f32", "shape": [...], "byte_offset": o,
// "byte_length": 4 * numel}; offsets are relative to the payload start and
// 8-byte aligned. The optional "__metadata__" key holds model configuration.

struct TensorContainer {
    std::map<std::string, Tensor> tensors;
    std::string metadata_json = "{}";
};

std::vector<std::uint8_t> encode_container(const TensorContainer& c);
TensorContainer decode_container(const std::vector<std::uint8_t>& bytes);
void write_container(const std::filesystem::path& path, const TensorContainer& c);
TensorContainer read_container(const std::filesystem::path& path);

struct LoadReport {
    std::vector<std::string> warnings;  // e.g. unexpected tensors
};

void save_teacher(const TeacherCheckpoint& ckpt, const std::filesystem::path& path);
TeacherCheckpoint load_teacher(const std::filesystem::path& path, LoadReport* report = nullptr);
TeacherCheckpoint teacher_from_container(const TensorContainer& c, LoadReport* report = nullptr);
TensorContainer teacher_to_container(const TeacherCheckpoint& ckpt);

// Standalone config JSON.
std::string transformer_config_to_json(const TransformerConfig& c);
TransformerConfig transformer_config_from_json(const std::string& text);
TransformerConfig load_transformer_config(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace upcycle
