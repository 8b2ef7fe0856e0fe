#pragma once

// Minimal pre-LN transformer in two flavours (masked prediction and next-token
// prediction). Every FFN intermediate activation (post-GELU, pre-down-
// projection) is a "neuron": forward passes expose them, interventions
// rewrite them, and the backward pass returns exact gradients of the answer
// probability with respect to them.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "knlab/core.hpp"
#include "knlab/corpus.hpp"

namespace knlab {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
    Architecture architecture = Architecture::auto_encoding;
    int n_layers = 4;
    int model_dim = 128;
    int n_heads = 4;
    int ffn_dim = 512;
    int vocab_size = 0;
    int max_seq_len = 16;
    std::uint64_t seed = 0;
    double dropout = 0.1; // on FFN activations, training only

    void validate() const {
        if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
        if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
        if (n_heads < 1 || model_dim < 1 || model_dim % n_heads != 0)
            throw ConfigError("model_dim (" + std::to_string(model_dim) + ") must be divisible by n_heads (" +
                              std::to_string(n_heads) + ")");
        if (vocab_size < 4) throw ConfigError("vocab_size must cover the special tokens and at least one word");
        if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    int head_dim() const { return model_dim / n_heads; }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"architecture", std::string(to_string(c.architecture))},
            {"n_layers", c.n_layers},
            {"model_dim", c.model_dim},
            {"n_heads", c.n_heads},
            {"ffn_dim", c.ffn_dim},
            {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len},
            {"seed", c.seed},
            {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.architecture = parse_architecture(j.at("architecture").get<std::string>());
    c.n_layers = j.at("n_layers").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.dropout = j.value("dropout", 0.1);
    return c;
}

struct BlockParams {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    Mat ln2_g, ln2_b;
    Mat w_up, b_up, w_down, b_down;
};

struct Params {
    Mat tok_emb, pos_emb;
    std::vector<BlockParams> blocks;
    Mat lnf_g, lnf_b;
    Mat w_out, b_out;

    template <class Self>
    static auto named_impl(Self& self) {
        using M = std::conditional_t<std::is_const_v<Self>, const Mat, Mat>;
        std::vector<std::pair<std::string, M*>> out;
        out.emplace_back("tok_emb", &self.tok_emb);
        out.emplace_back("pos_emb", &self.pos_emb);
        for (std::size_t i = 0; i < self.blocks.size(); ++i) {
            auto& b = self.blocks[i];
            const std::string p = "blocks." + std::to_string(i) + ".";
            out.emplace_back(p + "ln1_g", &b.ln1_g);
            out.emplace_back(p + "ln1_b", &b.ln1_b);
            out.emplace_back(p + "wq", &b.wq);
            out.emplace_back(p + "bq", &b.bq);
            out.emplace_back(p + "wk", &b.wk);
            out.emplace_back(p + "bk", &b.bk);
            out.emplace_back(p + "wv", &b.wv);
            out.emplace_back(p + "bv", &b.bv);
            out.emplace_back(p + "wo", &b.wo);
            out.emplace_back(p + "bo", &b.bo);
            out.emplace_back(p + "ln2_g", &b.ln2_g);
            out.emplace_back(p + "ln2_b", &b.ln2_b);
            out.emplace_back(p + "w_up", &b.w_up);
            out.emplace_back(p + "b_up", &b.b_up);
            out.emplace_back(p + "w_down", &b.w_down);
            out.emplace_back(p + "b_down", &b.b_down);
        }
        out.emplace_back("lnf_g", &self.lnf_g);
        out.emplace_back("lnf_b", &self.lnf_b);
        out.emplace_back("w_out", &self.w_out);
        out.emplace_back("b_out", &self.b_out);
        return out;
    }

    std::vector<std::pair<std::string, Mat*>> named() { return named_impl(*this); }
    std::vector<std::pair<std::string, const Mat*>> named() const { return named_impl(*this); }

    /// Same shapes, all zeros.
    Params zeros_like() const {
        Params z = *this;
        for (auto& [name, m] : z.named()) m->setZero();
        return z;
    }
};

struct Model {
    ModelConfig config;
    Params params;
};

inline Model init_model(const ModelConfig& config) {
    config.validate();
    const int d = config.model_dim, n = config.ffn_dim, V = config.vocab_size;
    Rng rng(derive_seed(config.seed, "init"));
    auto normal = [&](int r, int c, double std) {
        Mat m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std;
        return m;
    };
    auto ones = [](int c) { return Mat::Ones(1, c); };
    auto zeros = [](int c) { return Mat::Zero(1, c); };
    const double std_w = 0.02;
    const double std_res = 0.02 / std::sqrt(2.0 * config.n_layers);

    Model m;
    m.config = config;
    auto& p = m.params;
    p.tok_emb = normal(V, d, std_w);
    p.pos_emb = normal(config.max_seq_len, d, std_w);
    for (int l = 0; l < config.n_layers; ++l) {
        BlockParams b;
        b.ln1_g = ones(d);
        b.ln1_b = zeros(d);
        b.wq = normal(d, d, std_w);
        b.bq = zeros(d);
        b.wk = normal(d, d, std_w);
        b.bk = zeros(d);
        b.wv = normal(d, d, std_w);
        b.bv = zeros(d);
        b.wo = normal(d, d, std_res);
        b.bo = zeros(d);
        b.ln2_g = ones(d);
        b.ln2_b = zeros(d);
        b.w_up = normal(d, n, std_w);
        b.b_up = zeros(n);
        b.w_down = normal(n, d, std_res);
        b.b_down = zeros(d);
        p.blocks.push_back(std::move(b));
    }
    p.lnf_g = ones(d);
    p.lnf_b = zeros(d);
    p.w_out = normal(d, V, std_w);
    p.b_out = zeros(V);
    return m;
}

// ---------------------------------------------------------------------------
// Interventions

enum class EditMode { suppress, enhance, set_to, scale };
enum class EditScope { all_positions, prediction_position };

struct NeuronEdit {
    NeuronId neuron;
    EditMode mode = EditMode::suppress;
    double value = 0.0; // factor for enhance/scale, target for set_to
};

struct Intervention {
    std::vector<NeuronEdit> edits;
    EditScope scope = EditScope::all_positions;

    static Intervention suppress(const std::set<NeuronId>& targets) {
        Intervention iv;
        for (auto id : targets) iv.edits.push_back({id, EditMode::suppress, 0.0});
        return iv;
    }

    static Intervention enhance(const std::set<NeuronId>& targets, double factor = 2.0) {
        Intervention iv;
        for (auto id : targets) iv.edits.push_back({id, EditMode::enhance, factor});
        return iv;
    }

    /// Fixes the given units to constants at the prediction position only.
    static Intervention clamp(const std::map<NeuronId, double>& values) {
        Intervention iv;
        iv.scope = EditScope::prediction_position;
        for (const auto& [id, v] : values) iv.edits.push_back({id, EditMode::set_to, v});
        return iv;
    }

    void validate(const ModelConfig& c) const {
        if (edits.empty()) throw PreconditionError("intervention has no targets");
        std::set<NeuronId> seen;
        for (const auto& e : edits) {
            if (e.neuron.layer < 0 || e.neuron.layer >= c.n_layers || e.neuron.unit < 0 || e.neuron.unit >= c.ffn_dim)
                throw PreconditionError("neuron " + to_string(e.neuron) + " out of range");
            if (!seen.insert(e.neuron).second)
                throw PreconditionError("neuron " + to_string(e.neuron) + " targeted by more than one edit");
            if (!std::isfinite(e.value)) throw PreconditionError("non-finite edit value for " + to_string(e.neuron));
        }
    }
};

// ---------------------------------------------------------------------------
// Kernels

namespace detail {

inline constexpr double kLnEps = 1e-5;

struct LnCache {
    Mat xhat;
    Eigen::VectorXd rstd;
};

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache* cache) {
    const auto D = static_cast<double>(x.cols());
    Mat xhat(x.rows(), x.cols());
    Eigen::VectorXd rstd(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).sum() / D;
        const auto centered = (x.row(i).array() - mean).matrix();
        const double var = centered.squaredNorm() / D;
        rstd(i) = 1.0 / std::sqrt(var + kLnEps);
        xhat.row(i) = centered * rstd(i);
    }
    Mat y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

inline Mat layer_norm_backward(const Mat& dy, const Mat& g, const LnCache& c, Mat* dg, Mat* db) {
    const auto D = static_cast<double>(dy.cols());
    if (dg) *dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (db) *db += dy.colwise().sum();
    Mat dxhat = dy.array().rowwise() * g.row(0).array();
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const double s1 = dxhat.row(i).sum();
        const double s2 = dxhat.row(i).dot(c.xhat.row(i));
        dx.row(i) = (c.rstd(i) / D) * (D * dxhat.row(i).array() - s1 - c.xhat.row(i).array() * s2).matrix();
    }
    return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
}

inline void softmax_row(Eigen::Ref<Eigen::RowVectorXd> r) {
    const double mx = r.maxCoeff();
    r = (r.array() - mx).exp().matrix();
    r /= r.sum();
}

/// Layout of a batched block call: `items` independent sequences of `rows`
/// positions each, stacked row-wise. Each item additionally attends to
/// `context` shared leading positions whose keys/values come from a cache.
/// With `query_row` >= 0 only that row of each item is carried past the
/// key/value projections (the block output then has one row per item).
struct BatchShape {
    int items = 1;
    int rows = 1;
    int context = 0;
    int query_row = -1;

    int out_rows() const { return query_row < 0 ? rows : 1; }
    int first_out_row() const { return query_row < 0 ? 0 : query_row; }
};

struct BlockCache {
    Mat x_in;
    LnCache ln1;
    Mat h1, hq, q, k, v;
    Mat probs; // (items * heads * out_rows) x (context + rows)
    Mat attn;
    Mat x_mid;
    LnCache ln2;
    Mat h2, pre, act;
    Mat grad_factor; // d act / d gelu(pre), elementwise
    Mat x_out;
};

inline void apply_edits(Mat& act, Mat& factor, const Mat& natural, const std::vector<const NeuronEdit*>& edits,
                        const std::vector<int>& rows) {
    for (const auto* e : edits) {
        const int j = e->neuron.unit;
        for (int r : rows) {
            switch (e->mode) {
            case EditMode::suppress:
                act(r, j) = 0.0;
                factor(r, j) = 0.0;
                break;
            case EditMode::enhance:
            case EditMode::scale:
                act(r, j) = natural(r, j) * e->value;
                factor(r, j) = e->value;
                break;
            case EditMode::set_to:
                act(r, j) = e->value;
                factor(r, j) = 0.0;
                break;
            }
        }
    }
}

inline Mat gather_rows(const Mat& x, BatchShape shape) {
    if (shape.query_row < 0) return x;
    Mat out(shape.items, x.cols());
    for (int b = 0; b < shape.items; ++b) out.row(b) = x.row(static_cast<Eigen::Index>(b) * shape.rows + shape.query_row);
    return out;
}

inline Mat block_forward(const BlockParams& p, const ModelConfig& cfg, const Mat& x_in, BatchShape shape,
                         const Mat* ctx_k, const Mat* ctx_v, bool causal, BlockCache& c,
                         const std::vector<const NeuronEdit*>* edits = nullptr, const std::vector<int>* edit_rows = nullptr,
                         Rng* dropout_rng = nullptr, double dropout = 0.0) {
    const int H = cfg.n_heads, dh = cfg.head_dim();
    const int s = shape.rows, C = shape.context;
    const int qr = shape.out_rows(), q0 = shape.first_out_row();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.x_in = x_in;
    c.h1 = layer_norm(x_in, p.ln1_g, p.ln1_b, &c.ln1);
    c.k = (c.h1 * p.wk).rowwise() + p.bk.row(0);
    c.v = (c.h1 * p.wv).rowwise() + p.bv.row(0);
    c.hq = gather_rows(c.h1, shape);
    c.q = (c.hq * p.wq).rowwise() + p.bq.row(0);
    c.probs.resize(static_cast<Eigen::Index>(shape.items) * H * qr, C + s);
    c.attn.resize(static_cast<Eigen::Index>(shape.items) * qr, x_in.cols());

    Mat keys(C + s, dh), vals(C + s, dh);
    for (int b = 0; b < shape.items; ++b) {
        for (int h = 0; h < H; ++h) {
            if (C > 0) {
                keys.topRows(C) = ctx_k->block(0, h * dh, C, dh);
                vals.topRows(C) = ctx_v->block(0, h * dh, C, dh);
            }
            keys.bottomRows(s) = c.k.block(b * s, h * dh, s, dh);
            vals.bottomRows(s) = c.v.block(b * s, h * dh, s, dh);
            Mat scores = (c.q.block(b * qr, h * dh, qr, dh) * keys.transpose()) * scale;
            for (int t = 0; t < qr; ++t) {
                if (causal)
                    for (int u = q0 + t + 1; u < s; ++u) scores(t, C + u) = -std::numeric_limits<double>::infinity();
                softmax_row(scores.row(t));
            }
            c.probs.block((static_cast<Eigen::Index>(b) * H + h) * qr, 0, qr, C + s) = scores;
            c.attn.block(b * qr, h * dh, qr, dh) = scores * vals;
        }
    }
    c.x_mid = gather_rows(x_in, shape) + ((c.attn * p.wo).rowwise() + p.bo.row(0));
    c.h2 = layer_norm(c.x_mid, p.ln2_g, p.ln2_b, &c.ln2);
    c.pre = (c.h2 * p.w_up).rowwise() + p.b_up.row(0);
    c.act = c.pre.unaryExpr([](double x) { return gelu(x); });
    c.grad_factor = Mat::Ones(c.act.rows(), c.act.cols());
    if (edits && !edits->empty()) {
        const Mat natural = c.act;
        apply_edits(c.act, c.grad_factor, natural, *edits, *edit_rows);
    }
    if (dropout_rng && dropout > 0.0) {
        const double keep = 1.0 - dropout;
        for (Eigen::Index i = 0; i < c.act.size(); ++i) {
            const double m = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
            c.act.data()[i] *= m;
            c.grad_factor.data()[i] *= m;
        }
    }
    c.x_out = c.x_mid + ((c.act * p.w_down).rowwise() + p.b_down.row(0));
    return c.x_out;
}

/// Backpropagates `dx_out` through one block. Returns d/dx_in. When `d_act`
/// is non-null it receives d/d(activation) for every output row and unit.
inline Mat block_backward(const BlockParams& p, const ModelConfig& cfg, const Mat& dx_out, BatchShape shape,
                          const Mat* ctx_k, const Mat* ctx_v, const BlockCache& c, BlockParams* g, Mat* d_act) {
    const int H = cfg.n_heads, dh = cfg.head_dim();
    const int s = shape.rows, C = shape.context;
    const int qr = shape.out_rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat da = dx_out * p.w_down.transpose();
    if (g) {
        g->w_down.noalias() += c.act.transpose() * dx_out;
        g->b_down += dx_out.colwise().sum();
    }
    Mat dpre = da.array() * c.grad_factor.array() * c.pre.unaryExpr([](double x) { return gelu_grad(x); }).array();
    if (d_act) *d_act = std::move(da);
    if (g) {
        g->w_up.noalias() += c.h2.transpose() * dpre;
        g->b_up += dpre.colwise().sum();
    }
    Mat dh2 = dpre * p.w_up.transpose();
    Mat dx_mid = dx_out + layer_norm_backward(dh2, p.ln2_g, c.ln2, g ? &g->ln2_g : nullptr, g ? &g->ln2_b : nullptr);

    if (g) {
        g->wo.noalias() += c.attn.transpose() * dx_mid;
        g->bo += dx_mid.colwise().sum();
    }
    Mat dattn = dx_mid * p.wo.transpose();
    Mat dq = Mat::Zero(c.q.rows(), c.q.cols());
    Mat dk = Mat::Zero(c.k.rows(), c.k.cols());
    Mat dv = Mat::Zero(c.v.rows(), c.v.cols());
    Mat keys(C + s, dh), vals(C + s, dh);
    for (int b = 0; b < shape.items; ++b) {
        for (int h = 0; h < H; ++h) {
            if (C > 0) {
                keys.topRows(C) = ctx_k->block(0, h * dh, C, dh);
                vals.topRows(C) = ctx_v->block(0, h * dh, C, dh);
            }
            keys.bottomRows(s) = c.k.block(b * s, h * dh, s, dh);
            vals.bottomRows(s) = c.v.block(b * s, h * dh, s, dh);
            const auto P = c.probs.block((static_cast<Eigen::Index>(b) * H + h) * qr, 0, qr, C + s);
            const Mat dO = dattn.block(b * qr, h * dh, qr, dh);
            Mat dP = dO * vals.transpose();
            Mat dvals = P.transpose() * dO;
            dv.block(b * s, h * dh, s, dh) += dvals.bottomRows(s);
            Mat dS = P.array() * (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
            dS *= scale;
            dq.block(b * qr, h * dh, qr, dh) += dS * keys;
            Mat dkeys = dS.transpose() * c.q.block(b * qr, h * dh, qr, dh);
            dk.block(b * s, h * dh, s, dh) += dkeys.bottomRows(s);
        }
    }
    if (g) {
        g->wq.noalias() += c.hq.transpose() * dq;
        g->bq += dq.colwise().sum();
        g->wk.noalias() += c.h1.transpose() * dk;
        g->bk += dk.colwise().sum();
        g->wv.noalias() += c.h1.transpose() * dv;
        g->bv += dv.colwise().sum();
    }
    Mat dh1 = dk * p.wk.transpose() + dv * p.wv.transpose();
    Mat dhq = dq * p.wq.transpose();
    if (shape.query_row < 0) {
        dh1 += dhq;
        return dx_mid + layer_norm_backward(dh1, p.ln1_g, c.ln1, g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
    }
    for (int b = 0; b < shape.items; ++b) dh1.row(static_cast<Eigen::Index>(b) * s + shape.query_row) += dhq.row(b);
    Mat dx_in = layer_norm_backward(dh1, p.ln1_g, c.ln1, g ? &g->ln1_g : nullptr, g ? &g->ln1_b : nullptr);
    for (int b = 0; b < shape.items; ++b) dx_in.row(static_cast<Eigen::Index>(b) * s + shape.query_row) += dx_mid.row(b);
    return dx_in;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Single-sequence forward/backward

struct ForwardTrace {
    std::vector<int> tokens;
    int prediction_position = 0;
    std::vector<detail::BlockCache> blocks;
    detail::LnCache lnf;
    Mat final_hidden; // 1 x d, normalized, prediction row only
    Eigen::RowVectorXd logits;
    Eigen::RowVectorXd probs;
};

inline void check_sequence(const Model& m, std::span<const int> tokens, int prediction_position) {
    if (tokens.empty()) throw PreconditionError("empty token sequence");
    if (static_cast<int>(tokens.size()) > m.config.max_seq_len)
        throw PreconditionError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                std::to_string(m.config.max_seq_len));
    if (prediction_position < 0 || prediction_position >= static_cast<int>(tokens.size()))
        throw PreconditionError("prediction position out of range");
    for (int t : tokens)
        if (t < 0 || t >= m.config.vocab_size) throw PreconditionError("token id " + std::to_string(t) + " out of range");
}

inline ForwardTrace run_forward(const Model& m, std::span<const int> tokens, int prediction_position,
                                const Intervention* iv = nullptr, Rng* dropout_rng = nullptr) {
    check_sequence(m, tokens, prediction_position);
    if (iv) iv->validate(m.config);
    const auto& cfg = m.config;
    const auto& p = m.params;
    const int T = static_cast<int>(tokens.size());

    ForwardTrace tr;
    tr.tokens.assign(tokens.begin(), tokens.end());
    tr.prediction_position = prediction_position;

    Mat x(T, cfg.model_dim);
    for (int t = 0; t < T; ++t) x.row(t) = p.tok_emb.row(tokens[static_cast<std::size_t>(t)]) + p.pos_emb.row(t);

    std::vector<int> rows;
    if (iv && iv->scope == EditScope::prediction_position) {
        rows = {prediction_position};
    } else {
        for (int t = 0; t < T; ++t) rows.push_back(t);
    }
    const bool causal = cfg.architecture == Architecture::auto_regressive;
    tr.blocks.resize(static_cast<std::size_t>(cfg.n_layers));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::vector<const NeuronEdit*> layer_edits;
        if (iv)
            for (const auto& e : iv->edits)
                if (e.neuron.layer == l) layer_edits.push_back(&e);
        x = detail::block_forward(p.blocks[static_cast<std::size_t>(l)], cfg, x, {1, T, 0}, nullptr, nullptr, causal,
                                  tr.blocks[static_cast<std::size_t>(l)], &layer_edits, &rows, dropout_rng,
                                  dropout_rng ? cfg.dropout : 0.0);
    }
    Mat last = x.row(prediction_position);
    tr.final_hidden = detail::layer_norm(last, p.lnf_g, p.lnf_b, &tr.lnf);
    tr.logits = (tr.final_hidden * p.w_out + p.b_out).row(0);
    tr.probs = tr.logits;
    detail::softmax_row(tr.probs);
    return tr;
}

/// Backpropagates d(objective)/d(logits). Accumulates parameter gradients
/// into `grads` when non-null; fills `neuron_grads` (L x n, prediction row)
/// when non-null.
inline void run_backward(const Model& m, const ForwardTrace& tr, const Eigen::RowVectorXd& dlogits, Params* grads,
                         Mat* neuron_grads) {
    const auto& cfg = m.config;
    const auto& p = m.params;
    const int T = static_cast<int>(tr.tokens.size());
    const int pos = tr.prediction_position;

    Mat dlog = dlogits;
    if (grads) {
        grads->w_out.noalias() += tr.final_hidden.transpose() * dlog;
        grads->b_out += dlog;
    }
    Mat dh = dlog * p.w_out.transpose();
    Mat dlast = detail::layer_norm_backward(dh, p.lnf_g, tr.lnf, grads ? &grads->lnf_g : nullptr,
                                            grads ? &grads->lnf_b : nullptr);
    Mat dx = Mat::Zero(T, cfg.model_dim);
    dx.row(pos) = dlast.row(0);
    const bool want_acts = neuron_grads != nullptr;
    if (want_acts) neuron_grads->resize(cfg.n_layers, cfg.ffn_dim);
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        Mat dact;
        dx = detail::block_backward(p.blocks[static_cast<std::size_t>(l)], cfg, dx, {1, T, 0}, nullptr, nullptr,
                                    tr.blocks[static_cast<std::size_t>(l)],
                                    grads ? &grads->blocks[static_cast<std::size_t>(l)] : nullptr,
                                    want_acts ? &dact : nullptr);
        if (want_acts) neuron_grads->row(l) = dact.row(pos);
    }
    if (grads) {
        for (int t = 0; t < T; ++t) {
            grads->tok_emb.row(tr.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
            grads->pos_emb.row(t) += dx.row(t);
        }
    }
}

/// d p(target) / d logits.
inline Eigen::RowVectorXd prob_logit_grad(const Eigen::RowVectorXd& probs, int target) {
    Eigen::RowVectorXd g = -probs[target] * probs;
    g[target] += probs[target];
    return g;
}

// ---------------------------------------------------------------------------
// Query-level operations

inline void check_query(const Model& m, const ClozeQuery& q) {
    if (q.architecture != m.config.architecture)
        throw PreconditionError("query '" + q.id + "' architecture does not match the model");
    if (q.gold_token < 0 || q.gold_token >= m.config.vocab_size)
        throw PreconditionError("gold token of '" + q.id + "' outside the model vocabulary");
}

/// Distribution over the vocabulary at the prediction position.
inline std::vector<double> predict(const Model& m, const ClozeQuery& q, const Intervention* iv = nullptr) {
    check_query(m, q);
    const auto tr = run_forward(m, q.tokens, q.blank_position, iv);
    return {tr.probs.data(), tr.probs.data() + tr.probs.size()};
}

inline double gold_probability(const Model& m, const ClozeQuery& q, const Intervention* iv = nullptr) {
    return predict(m, q, iv)[static_cast<std::size_t>(q.gold_token)];
}

inline int argmax(const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline bool is_mastered(const Model& m, const ClozeQuery& q) { return argmax(predict(m, q)) == q.gold_token; }

struct ActivationSnapshot {
    Mat values; // n_layers x ffn_dim
    int prediction_position = 0;
};

inline ActivationSnapshot snapshot_at(const ForwardTrace& tr, int position) {
    ActivationSnapshot s;
    s.prediction_position = position;
    s.values.resize(static_cast<Eigen::Index>(tr.blocks.size()), tr.blocks.front().act.cols());
    for (std::size_t l = 0; l < tr.blocks.size(); ++l) s.values.row(static_cast<Eigen::Index>(l)) = tr.blocks[l].act.row(position);
    return s;
}

inline ActivationSnapshot record_activations(const Model& m, const ClozeQuery& q) {
    check_query(m, q);
    return snapshot_at(run_forward(m, q.tokens, q.blank_position), q.blank_position);
}

/// Activations of the full statement (candidate filled into the blank), read
/// at the candidate's position.
inline ActivationSnapshot record_statement_activations(const Model& m, const ClozeQuery& q, int candidate) {
    check_query(m, q);
    auto [tokens, pos] = fill_statement(q, candidate);
    return snapshot_at(run_forward(m, tokens, pos), pos);
}

/// Exact d p(gold | q, clamp) / d(activation at the prediction position) for
/// every neuron, with `clamped` units fixed at the prediction position.
inline Mat grad_answer_prob_wrt_neurons(const Model& m, const ClozeQuery& q, const std::map<NeuronId, double>& clamped = {}) {
    check_query(m, q);
    Intervention iv = Intervention::clamp(clamped);
    const auto tr = run_forward(m, q.tokens, q.blank_position, clamped.empty() ? nullptr : &iv);
    Mat grads;
    run_backward(m, tr, prob_logit_grad(tr.probs, q.gold_token), nullptr, &grads);
    return grads;
}

/// Batched single-unit clamps. Row r fixes unit units[r] of `layer` to
/// values[r] at the prediction position (all other units natural) and
/// returns (F(clamp), dF/dvalue) for the gold token. Equivalent to calling
/// grad_answer_prob_wrt_neurons once per row, but shares the upstream work.
struct ClampedEval {
    std::vector<double> prob;
    std::vector<double> grad;
};

inline ClampedEval clamped_unit_gradients(const Model& m, const ForwardTrace& base, int gold, int layer,
                                          std::span<const int> units, std::span<const double> values,
                                          int chunk = 0) {
    const auto& cfg = m.config;
    const auto& p = m.params;
    const int L = cfg.n_layers, d = cfg.model_dim;
    const int T = static_cast<int>(base.tokens.size());
    const int pos = base.prediction_position;
    const bool ar = cfg.architecture == Architecture::auto_regressive;
    // Auto-regressive: the prediction row is the last row, so downstream
    // blocks only see one changed row and the prefix comes from the cache.
    const bool prefix_cached = ar && pos == T - 1;
    const int s = prefix_cached ? 1 : T;
    const int row_in_item = prefix_cached ? 0 : pos;
    if (chunk <= 0) chunk = prefix_cached ? 1024 : std::max(16, 2048 / T);

    const auto& bl = base.blocks[static_cast<std::size_t>(layer)];
    const Eigen::RowVectorXd base_row = bl.x_out.row(pos);
    const auto& w_down = p.blocks[static_cast<std::size_t>(layer)].w_down;

    ClampedEval out;
    out.prob.resize(units.size());
    out.grad.resize(units.size());
    for (std::size_t start = 0; start < units.size(); start += static_cast<std::size_t>(chunk)) {
        const int B = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(chunk), units.size() - start));
        Mat x(static_cast<Eigen::Index>(B) * s, d);
        for (int b = 0; b < B; ++b) {
            const int j = units[start + static_cast<std::size_t>(b)];
            const double delta = values[start + static_cast<std::size_t>(b)] - bl.act(pos, j);
            if (prefix_cached) {
                x.row(b) = base_row + delta * w_down.row(j);
            } else {
                x.block(static_cast<Eigen::Index>(b) * s, 0, s, d) = bl.x_out;
                x.row(static_cast<Eigen::Index>(b) * s + pos) = base_row + delta * w_down.row(j);
            }
        }
        const detail::BatchShape shape{B, s, prefix_cached ? pos : 0};
        // The last block only needs the prediction row past its key/value step.
        auto shape_for = [&](int l) {
            auto sh = shape;
            if (!prefix_cached && l == L - 1) sh.query_row = pos;
            return sh;
        };
        std::vector<detail::BlockCache> caches(static_cast<std::size_t>(L - layer - 1));
        std::vector<Mat> ctx_k(caches.size()), ctx_v(caches.size());
        for (int l = layer + 1; l < L; ++l) {
            const auto idx = static_cast<std::size_t>(l - layer - 1);
            if (prefix_cached) {
                ctx_k[idx] = base.blocks[static_cast<std::size_t>(l)].k.topRows(pos);
                ctx_v[idx] = base.blocks[static_cast<std::size_t>(l)].v.topRows(pos);
            }
            x = detail::block_forward(p.blocks[static_cast<std::size_t>(l)], cfg, x, shape_for(l),
                                      prefix_cached ? &ctx_k[idx] : nullptr, prefix_cached ? &ctx_v[idx] : nullptr, ar,
                                      caches[idx]);
        }
        const bool reduced = !prefix_cached && layer < L - 1;
        const int out_s = reduced ? 1 : s, out_row = reduced ? 0 : row_in_item;
        Mat last(B, d);
        for (int b = 0; b < B; ++b) last.row(b) = x.row(static_cast<Eigen::Index>(b) * out_s + out_row);
        detail::LnCache lnf;
        Mat hf = detail::layer_norm(last, p.lnf_g, p.lnf_b, &lnf);
        Mat logits = (hf * p.w_out).rowwise() + p.b_out.row(0);
        Mat dlogits(B, logits.cols());
        for (int b = 0; b < B; ++b) {
            Eigen::RowVectorXd row = logits.row(b);
            detail::softmax_row(row);
            out.prob[start + static_cast<std::size_t>(b)] = row[gold];
            dlogits.row(b) = prob_logit_grad(row, gold);
        }
        Mat dlast = detail::layer_norm_backward(dlogits * p.w_out.transpose(), p.lnf_g, lnf, nullptr, nullptr);
        Mat dx = Mat::Zero(x.rows(), d);
        for (int b = 0; b < B; ++b) dx.row(static_cast<Eigen::Index>(b) * out_s + out_row) = dlast.row(b);
        for (int l = L - 1; l > layer; --l) {
            const auto idx = static_cast<std::size_t>(l - layer - 1);
            dx = detail::block_backward(p.blocks[static_cast<std::size_t>(l)], cfg, dx, shape_for(l),
                                        prefix_cached ? &ctx_k[idx] : nullptr, prefix_cached ? &ctx_v[idx] : nullptr,
                                        caches[idx], nullptr, nullptr);
        }
        for (int b = 0; b < B; ++b) {
            const int j = units[start + static_cast<std::size_t>(b)];
            out.grad[start + static_cast<std::size_t>(b)] =
                dx.row(static_cast<Eigen::Index>(b) * s + row_in_item).dot(w_down.row(j));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    int epochs = 300;
    double learning_rate = 3e-3;
    int batch_size = 8;
    double grad_clip = 1.0;
    double label_smoothing = 0.0; // mass spread uniformly over the vocabulary
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    double final_accuracy = 0.0;
};

inline double top1_accuracy(const Model& m, const std::vector<ClozeQuery>& queries) {
    if (queries.empty()) return 0.0;
    int hits = 0;
    for (const auto& q : queries) hits += is_mastered(m, q) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

/// Adam on the cross-entropy of the gold token at the prediction position.
/// Single-threaded and seeded, so two runs with the same inputs produce the
/// same parameters bit for bit.
inline Model train(const std::vector<ClozeQuery>& corpus, const ModelConfig& config, const TrainOptions& opt,
                   TrainLog* log = nullptr) {
    if (corpus.empty()) throw PreconditionError("train: empty corpus");
    if (opt.epochs < 0 || opt.batch_size < 1 || !(opt.learning_rate > 0.0))
        throw ConfigError("train: epochs >= 0, batch_size >= 1 and learning_rate > 0 required");
    if (!(opt.label_smoothing >= 0.0 && opt.label_smoothing < 1.0))
        throw ConfigError("train: label_smoothing must be in [0, 1)");
    Model m = init_model(config);
    for (const auto& q : corpus) check_query(m, q);

    Params m1 = m.params.zeros_like(), m2 = m.params.zeros_like();
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    long step = 0;
    Rng order_rng(derive_seed(config.seed, "order"));
    Rng drop_rng(derive_seed(config.seed, "dropout"));
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainLog local;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            Params g = m.params.zeros_like();
            for (std::size_t i = start; i < end; ++i) {
                const auto& q = corpus[order[i]];
                auto tr = run_forward(m, q.tokens, q.blank_position, nullptr, &drop_rng);
                const double eps_ls = opt.label_smoothing;
                const double spread = eps_ls / static_cast<double>(config.vocab_size);
                Eigen::RowVectorXd target = Eigen::RowVectorXd::Constant(config.vocab_size, spread);
                target[q.gold_token] += 1.0 - eps_ls;
                loss_sum -= (target.array() * tr.probs.array().max(1e-300).log()).sum();
                Eigen::RowVectorXd dlog = tr.probs - target;
                dlog /= static_cast<double>(end - start);
                run_backward(m, tr, dlog, &g, nullptr);
            }
            if (!std::isfinite(loss_sum))
                throw NumericError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
            double norm2 = 0.0;
            for (const auto& [name, t] : std::as_const(g).named()) norm2 += t->squaredNorm();
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm))
                throw NumericError("training diverged (non-finite gradient) at epoch " + std::to_string(epoch));
            const double clip = (opt.grad_clip > 0.0 && norm > opt.grad_clip) ? opt.grad_clip / norm : 1.0;
            ++step;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
            auto P = m.params.named();
            auto G = g.named();
            auto M1 = m1.named();
            auto M2 = m2.named();
            for (std::size_t t = 0; t < P.size(); ++t) {
                Mat gt = *G[t].second * clip;
                *M1[t].second = b1 * *M1[t].second + (1.0 - b1) * gt;
                *M2[t].second = b2 * *M2[t].second + (1.0 - b2) * gt.cwiseProduct(gt);
                *P[t].second -= (opt.learning_rate *
                                 ((M1[t].second->array() / c1) / ((M2[t].second->array() / c2).sqrt() + eps)))
                                    .matrix();
            }
        }
        EpochStats st{epoch, loss_sum / static_cast<double>(corpus.size()), top1_accuracy(m, corpus)};
        local.epochs.push_back(st);
    }
    local.final_accuracy = top1_accuracy(m, corpus);
    if (log) *log = std::move(local);
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: "KNLABCKP" magic, u32 version, u64 header length, JSON header
// (config + tensor table), then row-major little-endian doubles.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_model(const Model& m, const std::string& path) {
    nlohmann::json header;
    header["config"] = to_json(m.config);
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : m.params.named()) header["tensors"].push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}});
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write("KNLABCKP", 8);
    const std::uint32_t ver = kCheckpointVersion;
    const std::uint64_t len = hs.size();
    out.write(reinterpret_cast<const char*>(&ver), sizeof ver);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : m.params.named())
        out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
}

inline Model load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "KNLABCKP", 8) != 0) throw IoError("'" + path + "' is not a knlab checkpoint");
    std::uint32_t ver = 0;
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&ver), sizeof ver);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (ver != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(ver));
    std::string hs(len, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(len));
    const auto header = nlohmann::json::parse(hs);
    Model m = init_model(model_config_from_json(header.at("config")));
    auto named = m.params.named();
    const auto& table = header.at("tensors");
    if (table.size() != named.size()) throw IoError("checkpoint tensor table does not match config");
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto* t = named[i].second;
        if (table[i].at("name") != named[i].first || table[i].at("rows") != t->rows() || table[i].at("cols") != t->cols())
            throw IoError("checkpoint tensor '" + named[i].first + "' has an unexpected shape");
        in.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!in) throw IoError("truncated checkpoint '" + path + "'");
    return m;
}

} // namespace knlab
