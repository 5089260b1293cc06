#pragma once

// A small decoder-only transformer (pre-LN, GPT-2 layout) with a hook at the
// MLP input activation of every layer and reverse-mode gradients with respect
// to a value vector injected in place of the edit layer's MLP output.
//
// Activations are stored row-major by position: a (T x d) matrix holds one
// row per token. Weight matrices follow the y = W x convention.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "romekit/common.hpp"

namespace romekit {

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int d_mlp = 256;
    int n_layers = 4;
    int n_heads = 4;
    int max_seq = 64;
    int edit_layer = 2;

    // Init scales. Standard deviations are divided by sqrt(fan_in) where a
    // matrix multiplies activations.
    double embed_std = 1.0;
    double pos_std = 0.1;
    // Extra scale on the position-0 embedding. A large first-position
    // activation gives a prompt whose subject sits at position 0 a key far
    // from the same subject seen after a prefix.
    double sink_gain = 40.0;
    double attn_gain = 1.0;
    double attn_out_gain = 0.3;
    double fc_gain = 1.0;
    double fc_bias_std = 0.1;
    double proj_gain = 1.0;
    double unembed_gain = 4.0;

    /// Throws ConfigError when dimensions are inconsistent.
    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

struct LayerParams {
    Vector ln1_gain, ln1_bias;
    Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
    Vector ln2_gain, ln2_bias;
    Matrix w_fc;    // d_mlp x d_model
    Vector b_fc;    // d_mlp
    Matrix w_proj;  // d_model x d_mlp
};

struct ModelParams {
    ModelConfig config;
    Matrix tok_embed;  // vocab x d_model
    Matrix pos_embed;  // max_seq x d_model
    std::vector<LayerParams> layers;
    Vector lnf_gain, lnf_bias;
    Matrix unembed;  // vocab x d_model

    /// W_proj of the edit layer: the matrix rank-one edits modify.
    const Matrix& edited_matrix() const { return layers.at(config.edit_layer).w_proj; }
    Matrix& edited_matrix() { return layers.at(config.edit_layer).w_proj; }

    /// FNV-1a over every parameter's bit pattern, in a fixed order.
    std::uint64_t checksum() const;
    /// Same, restricted to one layer.
    std::uint64_t layer_checksum(int layer) const;
    bool all_finite() const;
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

struct LayerNormCache {
    Matrix normalized;  // x_hat
    Vector rstd;        // one per row
};

/// Per-layer activations. `resid_in`, `attn_out`, `ln2_out` and `key` are the
/// h, a, gamma(a+h) and k of the key definition; the rest feeds backprop.
struct LayerTrace {
    Matrix resid_in;
    LayerNormCache ln1;
    Matrix ln1_out;
    Matrix q, k_att, v_att;
    std::vector<Matrix> probs;  // one T x T causal attention map per head
    Matrix attn_concat;
    Matrix attn_out;
    LayerNormCache ln2;
    Matrix ln2_out;
    Matrix fc_pre;
    Matrix key;
    Matrix mlp_out;
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    LayerNormCache lnf;
    Matrix final_resid;
    Matrix logits;  // T x vocab
};

/// Replace the edit layer's MLP output at `position` by `value`.
struct Injection {
    int position = 0;
    Vector value;
};

void validate_tokens(const ModelConfig& config, std::span<const Token> tokens);

ForwardTrace forward(const ModelParams& params, std::span<const Token> tokens,
                     const std::optional<Injection>& injection = std::nullopt);

/// Convenience: logits only.
Matrix logits(const ModelParams& params, std::span<const Token> tokens);

/// log-softmax of one logit row.
Vector log_softmax(const Eigen::Ref<const Vector>& row);

// ---------------------------------------------------------------------------
// Value-vector gradients

struct LossValue {
    double value = 0.0;
    Matrix d_logits;    // T x vocab; may be left empty when zero
    Vector d_injected;  // d_model; may be left empty when zero
};

/// A scalar objective of the final logits and the injected vector itself.
using ValueLoss = std::function<LossValue(const Matrix& logits, const Vector& injected)>;

ValueLoss constant_loss(double c);
ValueLoss half_squared_norm_loss();
/// log P(token | prefix ending at `position`), read from the logits row at
/// `position`; a negative position counts from the end.
ValueLoss target_log_prob_loss(Token token, int position = -1);

/// Residual state of a prompt up to the edit layer's MLP output, which does
/// not depend on the injected vector and can be reused across solver steps.
struct EditSiteState {
    TokenSeq tokens;
    Matrix pre_mlp_resid;  // resid_in + attn_out at the edit layer
    Matrix mlp_out;        // unedited MLP output at the edit layer
    Matrix key;            // edit-layer key activations, T x d_mlp
};

EditSiteState prepare_edit_site(const ModelParams& params, std::span<const Token> tokens);

struct ValueEvaluation {
    double loss = 0.0;
    Vector gradient;  // empty unless requested
    Matrix logits;
};

ValueEvaluation evaluate_injection(const ModelParams& params, const EditSiteState& site,
                                   int position, const Vector& injected_v,
                                   const ValueLoss& loss, bool with_gradient);

/// Gradient of `loss` with respect to the vector injected at the edit layer.
Vector value_gradient(const ModelParams& params, std::span<const Token> tokens, int position,
                      const Vector& injected_v, const ValueLoss& loss);

// ---------------------------------------------------------------------------
// Generation

enum class DecodeMode { greedy, sample };

struct GenerationSettings {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

/// Returns the prompt extended by `steps` tokens. Throws TruncationError when
/// the result would not fit in max_seq.
TokenSeq generate(const ModelParams& params, std::span<const Token> prompt, int steps,
                  const GenerationSettings& settings = {});

/// argmax of the final-position logits.
Token greedy_next(const ModelParams& params, std::span<const Token> prompt);

/// Softmax probabilities of the final position.
Vector next_token_probs(const ModelParams& params, std::span<const Token> prompt);

// ---------------------------------------------------------------------------
// Checkpoints: JSON with declared shapes.

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace romekit
