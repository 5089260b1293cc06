#include "romekit/tiny_lm.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>

namespace romekit {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, LayerNormCache& cache) {
    const Eigen::Index rows = x.rows();
    const double d = static_cast<double>(x.cols());
    cache.normalized.resize(x.rows(), x.cols());
    cache.rstd.resize(rows);
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mean = x.row(r).sum() / d;
        const double var = (x.row(r).array() - mean).square().sum() / d;
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd(r) = rstd;
        cache.normalized.row(r) = (x.row(r).array() - mean) * rstd;
        out.row(r) = cache.normalized.row(r).cwiseProduct(gain.transpose()) + bias.transpose();
    }
    return out;
}

Matrix layer_norm_backward(const Matrix& d_out, const Vector& gain, const LayerNormCache& cache) {
    const double d = static_cast<double>(d_out.cols());
    Matrix dx(d_out.rows(), d_out.cols());
    for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
        const Eigen::RowVectorXd dxhat = d_out.row(r).cwiseProduct(gain.transpose());
        const double mean_dxhat = dxhat.sum() / d;
        const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.normalized.row(r)).sum() / d;
        dx.row(r) = cache.rstd(r) *
                    (dxhat.array() - mean_dxhat - cache.normalized.row(r).array() * mean_dxhat_xhat)
                        .matrix();
    }
    return dx;
}

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    // Fill row by row so the stream order does not depend on Eigen's storage.
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = dist(rng);
        }
    }
    return m;
}

Vector gaussian_vec(std::mt19937_64& rng, Eigen::Index n, double stddev) {
    return gaussian(rng, n, 1, stddev);
}

/// Runs one transformer block. The injection, if any, overwrites one row of
/// the MLP output before the residual add.
Matrix run_layer(const ModelConfig& cfg, const LayerParams& lp, const Matrix& x, LayerTrace& tr,
                 const Injection* injection) {
    const Eigen::Index seq = x.rows();
    const int heads = cfg.n_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    tr.resid_in = x;
    tr.ln1_out = layer_norm(x, lp.ln1_gain, lp.ln1_bias, tr.ln1);
    tr.q = tr.ln1_out * lp.w_q.transpose();
    tr.k_att = tr.ln1_out * lp.w_k.transpose();
    tr.v_att = tr.ln1_out * lp.w_v.transpose();
    tr.probs.assign(heads, Matrix());
    tr.attn_concat.resize(seq, cfg.d_model);
    for (int h = 0; h < heads; ++h) {
        const auto qh = tr.q.middleCols(h * hd, hd);
        const auto kh = tr.k_att.middleCols(h * hd, hd);
        const auto vh = tr.v_att.middleCols(h * hd, hd);
        Matrix scores = (qh * kh.transpose()) * scale;
        Matrix& p = tr.probs[h];
        p.setZero(seq, seq);
        for (Eigen::Index i = 0; i < seq; ++i) {
            const double mx = scores.row(i).head(i + 1).maxCoeff();
            double total = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                p(i, j) = std::exp(scores(i, j) - mx);
                total += p(i, j);
            }
            p.row(i).head(i + 1) /= total;
        }
        tr.attn_concat.middleCols(h * hd, hd) = p * vh;
    }
    tr.attn_out = tr.attn_concat * lp.w_o.transpose();

    const Matrix z = x + tr.attn_out;
    tr.ln2_out = layer_norm(z, lp.ln2_gain, lp.ln2_bias, tr.ln2);
    tr.fc_pre = tr.ln2_out * lp.w_fc.transpose();
    tr.fc_pre.rowwise() += lp.b_fc.transpose();
    tr.key = tr.fc_pre.unaryExpr([](double v) { return gelu(v); });
    tr.mlp_out = tr.key * lp.w_proj.transpose();
    if (injection != nullptr) {
        tr.mlp_out.row(injection->position) = injection->value.transpose();
    }
    return z + tr.mlp_out;
}

/// Gradient of the block input given the gradient of its output.
Matrix layer_backward(const ModelConfig& cfg, const LayerParams& lp, const LayerTrace& tr,
                      const Matrix& d_out) {
    const int heads = cfg.n_heads;
    const int hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // MLP branch: out = z + W_proj gelu(W_fc LN2(z) + b)
    Matrix d_key = d_out * lp.w_proj;
    Matrix d_pre = d_key.cwiseProduct(tr.fc_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    Matrix d_ln2 = d_pre * lp.w_fc;
    Matrix d_z = d_out + layer_norm_backward(d_ln2, lp.ln2_gain, tr.ln2);

    // Attention branch: z = x + Attn(LN1(x))
    Matrix d_concat = d_z * lp.w_o;
    Matrix d_q = Matrix::Zero(tr.q.rows(), tr.q.cols());
    Matrix d_k = Matrix::Zero(tr.k_att.rows(), tr.k_att.cols());
    Matrix d_v = Matrix::Zero(tr.v_att.rows(), tr.v_att.cols());
    for (int h = 0; h < heads; ++h) {
        const Matrix& p = tr.probs[h];
        const auto d_oh = d_concat.middleCols(h * hd, hd);
        const auto qh = tr.q.middleCols(h * hd, hd);
        const auto kh = tr.k_att.middleCols(h * hd, hd);
        const auto vh = tr.v_att.middleCols(h * hd, hd);
        Matrix d_p = d_oh * vh.transpose();
        d_v.middleCols(h * hd, hd) = p.transpose() * d_oh;
        Matrix d_s(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.rows(); ++i) {
            const double dot = p.row(i).dot(d_p.row(i));
            d_s.row(i) = p.row(i).cwiseProduct((d_p.row(i).array() - dot).matrix());
        }
        d_s *= scale;
        d_q.middleCols(h * hd, hd) = d_s * kh;
        d_k.middleCols(h * hd, hd) = d_s.transpose() * qh;
    }
    Matrix d_ln1 = d_q * lp.w_q + d_k * lp.w_k + d_v * lp.w_v;
    return d_z + layer_norm_backward(d_ln1, lp.ln1_gain, tr.ln1);
}

Matrix embed(const ModelParams& params, std::span<const Token> tokens) {
    const auto seq = static_cast<Eigen::Index>(tokens.size());
    Matrix x(seq, params.config.d_model);
    for (Eigen::Index t = 0; t < seq; ++t) {
        x.row(t) = params.tok_embed.row(tokens[t]) + params.pos_embed.row(t);
    }
    return x;
}

void finish(const ModelParams& params, const Matrix& resid, ForwardTrace& trace) {
    trace.final_resid = resid;
    const Matrix normed = layer_norm(resid, params.lnf_gain, params.lnf_bias, trace.lnf);
    trace.logits = normed * params.unembed.transpose();
}

class Fnv1a {
public:
    void add(const double* data, std::size_t n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n * sizeof(double); ++i) {
            hash_ ^= bytes[i];
            hash_ *= 0x100000001B3ULL;
        }
    }
    void add(const Matrix& m) { add(m.data(), static_cast<std::size_t>(m.size())); }
    void add(const Vector& v) { add(v.data(), static_cast<std::size_t>(v.size())); }
    std::uint64_t value() const { return hash_; }

private:
    std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

void hash_layer(Fnv1a& h, const LayerParams& lp) {
    h.add(lp.ln1_gain);
    h.add(lp.ln1_bias);
    h.add(lp.w_q);
    h.add(lp.w_k);
    h.add(lp.w_v);
    h.add(lp.w_o);
    h.add(lp.ln2_gain);
    h.add(lp.ln2_bias);
    h.add(lp.w_fc);
    h.add(lp.b_fc);
    h.add(lp.w_proj);
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size < 16) fail("vocab_size must be >= 16");
    if (d_model < 1 || d_mlp < 1 || n_layers < 1 || n_heads < 1 || max_seq < 1) {
        fail("dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        fail("d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
             std::to_string(n_heads) + ")");
    }
    if (edit_layer < 0 || edit_layer >= n_layers) fail("edit_layer out of range");
}

std::uint64_t ModelParams::checksum() const {
    Fnv1a h;
    h.add(tok_embed);
    h.add(pos_embed);
    for (const auto& lp : layers) {
        hash_layer(h, lp);
    }
    h.add(lnf_gain);
    h.add(lnf_bias);
    h.add(unembed);
    return h.value();
}

std::uint64_t ModelParams::layer_checksum(int layer) const {
    Fnv1a h;
    hash_layer(h, layers.at(layer));
    return h.value();
}

bool ModelParams::all_finite() const {
    bool ok = tok_embed.allFinite() && pos_embed.allFinite() && lnf_gain.allFinite() &&
              lnf_bias.allFinite() && unembed.allFinite();
    for (const auto& lp : layers) {
        ok = ok && lp.ln1_gain.allFinite() && lp.ln1_bias.allFinite() && lp.w_q.allFinite() &&
             lp.w_k.allFinite() && lp.w_v.allFinite() && lp.w_o.allFinite() &&
             lp.ln2_gain.allFinite() && lp.ln2_bias.allFinite() && lp.w_fc.allFinite() &&
             lp.b_fc.allFinite() && lp.w_proj.allFinite();
    }
    return ok;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int d = config.d_model;
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double inv_mlp = 1.0 / std::sqrt(static_cast<double>(config.d_mlp));

    ModelParams p;
    p.config = config;
    p.tok_embed = gaussian(rng, config.vocab_size, d, config.embed_std);
    p.pos_embed = gaussian(rng, config.max_seq, d, config.pos_std);
    p.pos_embed.row(0) *= config.sink_gain;
    p.layers.resize(config.n_layers);
    for (auto& lp : p.layers) {
        lp.ln1_gain = Vector::Ones(d);
        lp.ln1_bias = Vector::Zero(d);
        lp.w_q = gaussian(rng, d, d, config.attn_gain * inv_d);
        lp.w_k = gaussian(rng, d, d, config.attn_gain * inv_d);
        lp.w_v = gaussian(rng, d, d, inv_d);
        lp.w_o = gaussian(rng, d, d, config.attn_out_gain * inv_d);
        lp.ln2_gain = Vector::Ones(d);
        lp.ln2_bias = Vector::Zero(d);
        lp.w_fc = gaussian(rng, config.d_mlp, d, config.fc_gain * inv_d);
        lp.b_fc = gaussian_vec(rng, config.d_mlp, config.fc_bias_std);
        lp.w_proj = gaussian(rng, d, config.d_mlp, config.proj_gain * inv_mlp);
    }
    p.lnf_gain = Vector::Ones(d);
    p.lnf_bias = Vector::Zero(d);
    p.unembed = gaussian(rng, config.vocab_size, d, config.unembed_gain * inv_d);
    return p;
}

void validate_tokens(const ModelConfig& config, std::span<const Token> tokens) {
    if (tokens.empty()) {
        throw InputError("empty token sequence");
    }
    if (static_cast<int>(tokens.size()) > config.max_seq) {
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                         std::to_string(config.max_seq));
    }
    for (Token t : tokens) {
        if (t < 0 || t >= config.vocab_size) {
            throw InputError("token " + std::to_string(t) + " outside vocabulary");
        }
    }
}

ForwardTrace forward(const ModelParams& params, std::span<const Token> tokens,
                     const std::optional<Injection>& injection) {
    const ModelConfig& cfg = params.config;
    validate_tokens(cfg, tokens);
    if (injection) {
        if (injection->position < 0 || injection->position >= static_cast<int>(tokens.size())) {
            throw InputError("injection position out of range");
        }
        if (injection->value.size() != cfg.d_model) {
            throw InputError("injected vector has wrong dimension");
        }
    }
    ForwardTrace trace;
    trace.layers.resize(cfg.n_layers);
    Matrix x = embed(params, tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const Injection* inj = (injection && l == cfg.edit_layer) ? &*injection : nullptr;
        x = run_layer(cfg, params.layers[l], x, trace.layers[l], inj);
    }
    finish(params, x, trace);
    return trace;
}

Matrix logits(const ModelParams& params, std::span<const Token> tokens) {
    return forward(params, tokens).logits;
}

Vector log_softmax(const Eigen::Ref<const Vector>& row) {
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    return row.array() - lse;
}

// ---------------------------------------------------------------------------

ValueLoss constant_loss(double c) {
    return [c](const Matrix&, const Vector&) { return LossValue{c, {}, {}}; };
}

ValueLoss half_squared_norm_loss() {
    return [](const Matrix&, const Vector& v) { return LossValue{0.5 * v.squaredNorm(), {}, v}; };
}

ValueLoss target_log_prob_loss(Token token, int position) {
    return [token, position](const Matrix& lg, const Vector&) {
        const Eigen::Index row = position < 0 ? lg.rows() + position : position;
        if (row < 0 || row >= lg.rows()) {
            throw InputError("log-prob position out of range");
        }
        const Vector lsm = log_softmax(lg.row(row).transpose());
        LossValue out;
        out.value = lsm(token);
        out.d_logits = Matrix::Zero(lg.rows(), lg.cols());
        out.d_logits.row(row) = -lsm.array().exp().transpose();
        out.d_logits(row, token) += 1.0;
        return out;
    };
}

EditSiteState prepare_edit_site(const ModelParams& params, std::span<const Token> tokens) {
    const ModelConfig& cfg = params.config;
    validate_tokens(cfg, tokens);
    Matrix x = embed(params, tokens);
    LayerTrace tr;
    for (int l = 0; l <= cfg.edit_layer; ++l) {
        x = run_layer(cfg, params.layers[l], x, tr, nullptr);
    }
    EditSiteState site;
    site.tokens.assign(tokens.begin(), tokens.end());
    site.mlp_out = tr.mlp_out;
    site.pre_mlp_resid = tr.resid_in + tr.attn_out;
    site.key = tr.key;
    return site;
}

ValueEvaluation evaluate_injection(const ModelParams& params, const EditSiteState& site,
                                   int position, const Vector& injected_v,
                                   const ValueLoss& loss, bool with_gradient) {
    const ModelConfig& cfg = params.config;
    if (position < 0 || position >= static_cast<int>(site.tokens.size())) {
        throw InputError("injection position " + std::to_string(position) + " out of range");
    }
    if (injected_v.size() != cfg.d_model) {
        throw InputError("injected vector has wrong dimension");
    }
    Matrix mlp = site.mlp_out;
    mlp.row(position) = injected_v.transpose();
    Matrix x = site.pre_mlp_resid + mlp;

    ForwardTrace trace;
    trace.layers.resize(cfg.n_layers);
    for (int l = cfg.edit_layer + 1; l < cfg.n_layers; ++l) {
        x = run_layer(cfg, params.layers[l], x, trace.layers[l], nullptr);
    }
    finish(params, x, trace);

    const LossValue lv = loss(trace.logits, injected_v);
    ValueEvaluation out;
    out.loss = lv.value;
    out.logits = trace.logits;
    if (!with_gradient) {
        return out;
    }
    out.gradient = Vector::Zero(cfg.d_model);
    if (lv.d_logits.size() > 0) {
        const Matrix d_normed = lv.d_logits * params.unembed;
        Matrix d_x = layer_norm_backward(d_normed, params.lnf_gain, trace.lnf);
        for (int l = cfg.n_layers - 1; l > cfg.edit_layer; --l) {
            d_x = layer_backward(cfg, params.layers[l], trace.layers[l], d_x);
        }
        out.gradient += d_x.row(position).transpose();
    }
    if (lv.d_injected.size() > 0) {
        out.gradient += lv.d_injected;
    }
    return out;
}

Vector value_gradient(const ModelParams& params, std::span<const Token> tokens, int position,
                      const Vector& injected_v, const ValueLoss& loss) {
    const EditSiteState site = prepare_edit_site(params, tokens);
    return evaluate_injection(params, site, position, injected_v, loss, true).gradient;
}

// ---------------------------------------------------------------------------

Vector next_token_probs(const ModelParams& params, std::span<const Token> prompt) {
    const Matrix lg = logits(params, prompt);
    return log_softmax(lg.row(lg.rows() - 1).transpose()).array().exp();
}

Token greedy_next(const ModelParams& params, std::span<const Token> prompt) {
    const Matrix lg = logits(params, prompt);
    Eigen::Index best = 0;
    lg.row(lg.rows() - 1).maxCoeff(&best);
    return static_cast<Token>(best);
}

TokenSeq generate(const ModelParams& params, std::span<const Token> prompt, int steps,
                  const GenerationSettings& settings) {
    if (steps < 1) {
        throw InputError("generate: steps must be >= 1");
    }
    if (static_cast<int>(prompt.size()) + steps > params.config.max_seq) {
        throw TruncationError("generate: prompt length " + std::to_string(prompt.size()) + " + " +
                              std::to_string(steps) + " steps exceeds max_seq " +
                              std::to_string(params.config.max_seq));
    }
    TokenSeq out(prompt.begin(), prompt.end());
    std::mt19937_64 rng(settings.seed);
    for (int s = 0; s < steps; ++s) {
        const Matrix lg = logits(params, out);
        const Vector last = lg.row(lg.rows() - 1).transpose();
        Eigen::Index next = 0;
        if (settings.mode == DecodeMode::greedy) {
            last.maxCoeff(&next);
        } else {
            if (!(settings.temperature > 0.0)) {
                throw InputError("generate: temperature must be positive");
            }
            const Vector probs = log_softmax(last / settings.temperature).array().exp();
            const double u = uniform01(rng);
            double acc = 0.0;
            next = probs.size() - 1;
            for (Eigen::Index i = 0; i < probs.size(); ++i) {
                acc += probs(i);
                if (u < acc) {
                    next = i;
                    break;
                }
            }
        }
        out.push_back(static_cast<Token>(next));
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

json tensor_json(const std::string& name, const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            data.push_back(m(r, c));
        }
    }
    return json{{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", data}};
}

Matrix tensor_from(const json& t, Eigen::Index rows, Eigen::Index cols) {
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != rows || shape[1] != cols) {
        throw InputError("checkpoint tensor '" + t.at("name").get<std::string>() +
                         "' has unexpected shape");
    }
    const auto data = t.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
        throw InputError("checkpoint tensor data length mismatch");
    }
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
        }
    }
    return m;
}

json config_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"d_mlp", c.d_mlp},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},   {"max_seq", c.max_seq},
                {"edit_layer", c.edit_layer}};
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
    json tensors = json::array();
    tensors.push_back(tensor_json("tok_embed", params.tok_embed));
    tensors.push_back(tensor_json("pos_embed", params.pos_embed));
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& lp = params.layers[l];
        const std::string pre = "layers." + std::to_string(l) + ".";
        tensors.push_back(tensor_json(pre + "ln1_gain", lp.ln1_gain));
        tensors.push_back(tensor_json(pre + "ln1_bias", lp.ln1_bias));
        tensors.push_back(tensor_json(pre + "w_q", lp.w_q));
        tensors.push_back(tensor_json(pre + "w_k", lp.w_k));
        tensors.push_back(tensor_json(pre + "w_v", lp.w_v));
        tensors.push_back(tensor_json(pre + "w_o", lp.w_o));
        tensors.push_back(tensor_json(pre + "ln2_gain", lp.ln2_gain));
        tensors.push_back(tensor_json(pre + "ln2_bias", lp.ln2_bias));
        tensors.push_back(tensor_json(pre + "w_fc", lp.w_fc));
        tensors.push_back(tensor_json(pre + "b_fc", lp.b_fc));
        tensors.push_back(tensor_json(pre + "w_proj", lp.w_proj));
    }
    tensors.push_back(tensor_json("lnf_gain", params.lnf_gain));
    tensors.push_back(tensor_json("lnf_bias", params.lnf_bias));
    tensors.push_back(tensor_json("unembed", params.unembed));
    const json doc{{"format", "romekit-checkpoint-v1"},
                   {"config", config_json(params.config)},
                   {"tensors", tensors}};
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write checkpoint: " + path);
    }
    out << doc.dump();
    if (!out) {
        throw IoError("failed writing checkpoint: " + path);
    }
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read checkpoint: " + path);
    }
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed checkpoint: ") + e.what());
    }
    try {
        ModelParams p;
        const auto& c = doc.at("config");
        p.config.vocab_size = c.at("vocab_size");
        p.config.d_model = c.at("d_model");
        p.config.d_mlp = c.at("d_mlp");
        p.config.n_layers = c.at("n_layers");
        p.config.n_heads = c.at("n_heads");
        p.config.max_seq = c.at("max_seq");
        p.config.edit_layer = c.at("edit_layer");
        p.config.validate();
        const auto& cfg = p.config;

        std::map<std::string, const json*> by_name;
        for (const auto& t : doc.at("tensors")) {
            by_name[t.at("name").get<std::string>()] = &t;
        }
        auto get = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
            const auto it = by_name.find(name);
            if (it == by_name.end()) {
                throw InputError("checkpoint missing tensor '" + name + "'");
            }
            return tensor_from(*it->second, rows, cols);
        };
        const int d = cfg.d_model;
        p.tok_embed = get("tok_embed", cfg.vocab_size, d);
        p.pos_embed = get("pos_embed", cfg.max_seq, d);
        p.layers.resize(cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& lp = p.layers[l];
            const std::string pre = "layers." + std::to_string(l) + ".";
            lp.ln1_gain = get(pre + "ln1_gain", d, 1);
            lp.ln1_bias = get(pre + "ln1_bias", d, 1);
            lp.w_q = get(pre + "w_q", d, d);
            lp.w_k = get(pre + "w_k", d, d);
            lp.w_v = get(pre + "w_v", d, d);
            lp.w_o = get(pre + "w_o", d, d);
            lp.ln2_gain = get(pre + "ln2_gain", d, 1);
            lp.ln2_bias = get(pre + "ln2_bias", d, 1);
            lp.w_fc = get(pre + "w_fc", cfg.d_mlp, d);
            lp.b_fc = get(pre + "b_fc", cfg.d_mlp, 1);
            lp.w_proj = get(pre + "w_proj", d, cfg.d_mlp);
        }
        p.lnf_gain = get("lnf_gain", d, 1);
        p.lnf_bias = get("lnf_bias", d, 1);
        p.unembed = get("unembed", cfg.vocab_size, d);
        if (!p.all_finite()) {
            throw InputError("checkpoint contains non-finite weights");
        }
        return p;
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed checkpoint: ") + e.what());
    }
}

}  // namespace romekit
