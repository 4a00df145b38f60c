#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/corpus.hpp"
#include "irnlm/io.hpp"

namespace irnlm::minigpt {

// How the model sees token order: learned absolute position embeddings,
// no positional information at all, or a learned relative-distance bias
// added to the attention scores.
enum class PositionalMode { Absolute, None, RelativeBias };

// Which per-head tensor the relative bias is contracted with.
enum class BiasSource { Query, Key };

inline const char* positional_name(PositionalMode m) {
    switch (m) {
        case PositionalMode::Absolute: return "absolute";
        case PositionalMode::None: return "none";
        case PositionalMode::RelativeBias: return "relative_bias";
    }
    throw ConfigError("bad positional mode");
}

inline PositionalMode positional_from_name(const std::string& s) {
    if (s == "absolute") return PositionalMode::Absolute;
    if (s == "none") return PositionalMode::None;
    if (s == "relative_bias") return PositionalMode::RelativeBias;
    throw ConfigError("unknown positional mode '" + s + "'");
}

struct ModelConfig {
    int vocab_size = 0;
    int n_layers = 2;
    int n_heads = 4;
    int d_head = 8;
    int max_seq = 64;
    PositionalMode positional = PositionalMode::Absolute;
    BiasSource bias_source = BiasSource::Query;
    std::uint64_t seed = 1;

    int d_model() const { return n_heads * d_head; }
    int d_ff() const { return 4 * d_model(); }

    void validate() const {
        if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
        if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
        if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
        if (d_head < 1) throw ConfigError("d_head must be >= 1");
        if (max_seq < 2) throw ConfigError("max_seq must be >= 2");
    }

    io::json to_json() const {
        return io::json{{"vocab_size", vocab_size}, {"n_layers", n_layers},
                        {"n_heads", n_heads},       {"d_head", d_head},
                        {"max_seq", max_seq},       {"positional", positional_name(positional)},
                        {"bias_source", bias_source == BiasSource::Query ? "query" : "key"},
                        {"seed", seed}};
    }

    static ModelConfig from_json(const io::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_head = j.at("d_head").get<int>();
        c.max_seq = j.at("max_seq").get<int>();
        c.positional = positional_from_name(j.at("positional").get<std::string>());
        const std::string src = j.at("bias_source").get<std::string>();
        if (src == "query")
            c.bias_source = BiasSource::Query;
        else if (src == "key")
            c.bias_source = BiasSource::Key;
        else
            throw ConfigError("unknown bias_source '" + src + "'");
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

// Pre-norm block: x + attn(ln1(x)), then x + ff(ln2(x)).
struct LayerParams {
    Eigen::MatrixXd ln1_g, ln1_b;              // 1 x d
    Eigen::MatrixXd w_q, w_k, w_v, w_o;        // d x d
    Eigen::MatrixXd b_q, b_k, b_v, b_o;        // 1 x d
    Eigen::MatrixXd ln2_g, ln2_b;              // 1 x d
    Eigen::MatrixXd w_f1, b_f1, w_f2, b_f2;    // d x 4d, 1 x 4d, 4d x d, 1 x d
};

struct Parameters {
    ModelConfig cfg;
    Eigen::MatrixXd tok_emb;  // vocab x d
    Eigen::MatrixXd pos_emb;  // max_seq x d, Absolute mode only
    Eigen::MatrixXd rel_emb;  // (2*max_seq - 1) x d_head, RelativeBias mode only
    std::vector<LayerParams> layers;
    Eigen::MatrixXd lnf_g, lnf_b;  // 1 x d
    Eigen::MatrixXd w_out;         // d x vocab (untied from tok_emb)
    Eigen::MatrixXd b_out;         // 1 x vocab

    // Canonical tensor order shared by serialization, the optimizer and
    // gradient flattening.
    template <typename Self, typename F>
    static void visit_impl(Self& self, F&& f) {
        f("tok_emb", self.tok_emb);
        if (self.cfg.positional == PositionalMode::Absolute) f("pos_emb", self.pos_emb);
        if (self.cfg.positional == PositionalMode::RelativeBias) f("rel_emb", self.rel_emb);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            auto& lp = self.layers[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            f(p + "ln1_g", lp.ln1_g);
            f(p + "ln1_b", lp.ln1_b);
            f(p + "w_q", lp.w_q);
            f(p + "b_q", lp.b_q);
            f(p + "w_k", lp.w_k);
            f(p + "b_k", lp.b_k);
            f(p + "w_v", lp.w_v);
            f(p + "b_v", lp.b_v);
            f(p + "w_o", lp.w_o);
            f(p + "b_o", lp.b_o);
            f(p + "ln2_g", lp.ln2_g);
            f(p + "ln2_b", lp.ln2_b);
            f(p + "w_f1", lp.w_f1);
            f(p + "b_f1", lp.b_f1);
            f(p + "w_f2", lp.w_f2);
            f(p + "b_f2", lp.b_f2);
        }
        f("lnf_g", self.lnf_g);
        f("lnf_b", self.lnf_b);
        f("w_out", self.w_out);
        f("b_out", self.b_out);
    }

    template <typename F>
    void visit(F&& f) {
        visit_impl(*this, std::forward<F>(f));
    }
    template <typename F>
    void visit(F&& f) const {
        visit_impl(*this, std::forward<F>(f));
    }

    std::size_t n_params() const {
        std::size_t n = 0;
        visit([&](const std::string&, const Eigen::MatrixXd& m) {
            n += static_cast<std::size_t>(m.size());
        });
        return n;
    }
};

inline Parameters zeros_like(const Parameters& p) {
    Parameters z;
    z.cfg = p.cfg;
    z.tok_emb = Eigen::MatrixXd::Zero(p.tok_emb.rows(), p.tok_emb.cols());
    if (p.cfg.positional == PositionalMode::Absolute)
        z.pos_emb = Eigen::MatrixXd::Zero(p.pos_emb.rows(), p.pos_emb.cols());
    if (p.cfg.positional == PositionalMode::RelativeBias)
        z.rel_emb = Eigen::MatrixXd::Zero(p.rel_emb.rows(), p.rel_emb.cols());
    z.layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& s = p.layers[l];
        auto& d = z.layers[l];
        auto zero = [](const Eigen::MatrixXd& m) {
            return Eigen::MatrixXd::Zero(m.rows(), m.cols()).eval();
        };
        d.ln1_g = zero(s.ln1_g);
        d.ln1_b = zero(s.ln1_b);
        d.w_q = zero(s.w_q);
        d.b_q = zero(s.b_q);
        d.w_k = zero(s.w_k);
        d.b_k = zero(s.b_k);
        d.w_v = zero(s.w_v);
        d.b_v = zero(s.b_v);
        d.w_o = zero(s.w_o);
        d.b_o = zero(s.b_o);
        d.ln2_g = zero(s.ln2_g);
        d.ln2_b = zero(s.ln2_b);
        d.w_f1 = zero(s.w_f1);
        d.b_f1 = zero(s.b_f1);
        d.w_f2 = zero(s.w_f2);
        d.b_f2 = zero(s.b_f2);
    }
    z.lnf_g = Eigen::MatrixXd::Zero(1, p.cfg.d_model());
    z.lnf_b = Eigen::MatrixXd::Zero(1, p.cfg.d_model());
    z.w_out = Eigen::MatrixXd::Zero(p.w_out.rows(), p.w_out.cols());
    z.b_out = Eigen::MatrixXd::Zero(1, p.cfg.vocab_size);
    return z;
}

inline Parameters init_parameters(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model();
    Rng rng(cfg.seed);
    const auto randn = [&](Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = 0.02 * rng.normal();
        return m;
    };
    Parameters p;
    p.cfg = cfg;
    p.tok_emb = randn(cfg.vocab_size, d);
    if (cfg.positional == PositionalMode::Absolute) p.pos_emb = randn(cfg.max_seq, d);
    if (cfg.positional == PositionalMode::RelativeBias)
        p.rel_emb = randn(2 * cfg.max_seq - 1, cfg.d_head);
    p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& lp : p.layers) {
        lp.ln1_g = Eigen::MatrixXd::Ones(1, d);
        lp.ln1_b = Eigen::MatrixXd::Zero(1, d);
        lp.w_q = randn(d, d);
        lp.b_q = Eigen::MatrixXd::Zero(1, d);
        lp.w_k = randn(d, d);
        lp.b_k = Eigen::MatrixXd::Zero(1, d);
        lp.w_v = randn(d, d);
        lp.b_v = Eigen::MatrixXd::Zero(1, d);
        lp.w_o = randn(d, d);
        lp.b_o = Eigen::MatrixXd::Zero(1, d);
        lp.ln2_g = Eigen::MatrixXd::Ones(1, d);
        lp.ln2_b = Eigen::MatrixXd::Zero(1, d);
        lp.w_f1 = randn(d, cfg.d_ff());
        lp.b_f1 = Eigen::MatrixXd::Zero(1, cfg.d_ff());
        lp.w_f2 = randn(cfg.d_ff(), d);
        lp.b_f2 = Eigen::MatrixXd::Zero(1, d);
    }
    p.lnf_g = Eigen::MatrixXd::Ones(1, d);
    p.lnf_b = Eigen::MatrixXd::Zero(1, d);
    p.w_out = randn(d, cfg.vocab_size);
    p.b_out = Eigen::MatrixXd::Zero(1, cfg.vocab_size);
    return p;
}

// Distance table indices: entry (i, j) of a length-m score matrix maps
// to row n-1+j-i of the relative embedding table (n = max_seq), so all
// 2n-1 signed offsets get distinct rows shared across heads and layers.
inline Eigen::MatrixXi relative_distance(int m, int n) {
    Eigen::MatrixXi d(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) d(i, j) = n - 1 + j - i;
    return d;
}

// Lookup of the distance matrix through the relative embedding table:
// entry [j] is an m x d_head matrix whose row k is the embedding of the
// distance id between positions j and k.
inline std::vector<Eigen::MatrixXd> embed_distances(const Eigen::MatrixXi& d,
                                                    const Eigen::MatrixXd& table) {
    const int m = static_cast<int>(d.rows());
    std::vector<Eigen::MatrixXd> out(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
        Eigen::MatrixXd rows(m, table.cols());
        for (int k = 0; k < m; ++k) {
            const int id = d(j, k);
            if (id < 0 || id >= table.rows())
                throw DataError("distance id " + std::to_string(id) + " outside embedding table");
            rows.row(k) = table.row(id);
        }
        out[static_cast<std::size_t>(j)] = std::move(rows);
    }
    return out;
}

// Per-head additive attention bias:
//   W[h][j][k] = sum_d src_heads[h](j, d) * u_embedded[j](k, d)
// where src_heads holds the per-head query (default) or key vectors.
inline std::vector<Eigen::MatrixXd> relative_bias(const std::vector<Eigen::MatrixXd>& src_heads,
                                                  const std::vector<Eigen::MatrixXd>& u_embedded) {
    if (src_heads.empty()) throw DataError("no heads");
    const Eigen::Index m = src_heads[0].rows();
    const Eigen::Index dh = src_heads[0].cols();
    if (static_cast<Eigen::Index>(u_embedded.size()) != m)
        throw DataError("embedded distance tensor rows do not match sequence length");
    for (const auto& u : u_embedded)
        if (u.rows() != m || u.cols() != dh) throw DataError("embedded distance tensor shape mismatch");
    std::vector<Eigen::MatrixXd> out;
    out.reserve(src_heads.size());
    for (const auto& src : src_heads) {
        if (src.rows() != m || src.cols() != dh) throw DataError("head tensor shape mismatch");
        Eigen::MatrixXd w(m, m);
        for (Eigen::Index j = 0; j < m; ++j)
            w.row(j) = (u_embedded[static_cast<std::size_t>(j)] * src.row(j).transpose()).transpose();
        out.push_back(std::move(w));
    }
    return out;
}

namespace detail {

constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi + x * pdf;
}

struct LnCache {
    Eigen::MatrixXd x_hat;    // normalized rows
    Eigen::VectorXd inv_std;  // per row
};

inline Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& g,
                                  const Eigen::MatrixXd& b, LnCache& cache) {
    const Eigen::Index m = x.rows(), d = x.cols();
    cache.x_hat.resize(m, d);
    cache.inv_std.resize(m);
    Eigen::MatrixXd out(m, d);
    for (Eigen::Index i = 0; i < m; ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        cache.inv_std(i) = inv;
        cache.x_hat.row(i) = (x.row(i).array() - mu) * inv;
        out.row(i) = cache.x_hat.row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
    return out;
}

// dx for y = g.x_hat + b given dy; also accumulates dg, db.
inline Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LnCache& cache,
                                           const Eigen::MatrixXd& g, Eigen::MatrixXd& dg,
                                           Eigen::MatrixXd& db) {
    const Eigen::Index m = dy.rows(), d = dy.cols();
    Eigen::MatrixXd dx(m, d);
    for (Eigen::Index i = 0; i < m; ++i) {
        dg.row(0) += dy.row(i).cwiseProduct(cache.x_hat.row(i));
        db.row(0) += dy.row(i);
        const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(g.row(0));
        const double mean_dxhat = dxhat.mean();
        const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.x_hat.row(i)).mean();
        dx.row(i) = cache.inv_std(i) *
                    (dxhat.array() - mean_dxhat - cache.x_hat.row(i).array() * mean_dxhat_xhat);
    }
    return dx;
}

struct LayerCache {
    Eigen::MatrixXd x_in;
    LnCache ln1;
    Eigen::MatrixXd a1;
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per-head softmax, m x m
    Eigen::MatrixXd concat;
    Eigen::MatrixXd x_mid;
    LnCache ln2;
    Eigen::MatrixXd a2;
    Eigen::MatrixXd f1;  // pre-GELU
    Eigen::MatrixXd gact;
    Eigen::MatrixXd x_out;
};

struct ForwardCache {
    Eigen::MatrixXd x0;
    std::vector<LayerCache> layers;
    LnCache lnf;
    Eigen::MatrixXd xf;
    Eigen::MatrixXd logits;
};

}  // namespace detail

struct ForwardResult {
    Eigen::MatrixXd logits;                  // m x vocab
    std::vector<Eigen::MatrixXd> hidden;     // block outputs, before the final norm
    std::vector<std::vector<Eigen::MatrixXd>> attention;  // filled on request: layer x head
};

namespace detail {

inline void check_ids(const Parameters& p, const std::vector<int>& ids) {
    if (ids.empty()) throw DataError("empty input sequence");
    if (static_cast<int>(ids.size()) > p.cfg.max_seq)
        throw DataError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq " +
                        std::to_string(p.cfg.max_seq));
    for (int id : ids)
        if (id < 0 || id >= p.cfg.vocab_size)
            throw DataError("token id out of range: " + std::to_string(id));
}

inline ForwardResult forward_impl(const Parameters& p, const std::vector<int>& ids,
                                  ForwardCache* cache, bool capture_attention = false) {
    check_ids(p, ids);
    const int m = static_cast<int>(ids.size());
    const int d = p.cfg.d_model();
    const int h = p.cfg.n_heads;
    const int dh = p.cfg.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Eigen::MatrixXd x(m, d);
    for (int t = 0; t < m; ++t) x.row(t) = p.tok_emb.row(ids[static_cast<std::size_t>(t)]);
    if (p.cfg.positional == PositionalMode::Absolute) x += p.pos_emb.topRows(m);
    if (cache) {
        cache->x0 = x;
        cache->layers.resize(p.layers.size());
    }

    ForwardResult res;
    res.hidden.reserve(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const LayerParams& lp = p.layers[l];
        detail::LayerCache local;
        detail::LayerCache& lc = cache ? cache->layers[l] : local;
        lc.x_in = x;
        lc.a1 = layer_norm(x, lp.ln1_g, lp.ln1_b, lc.ln1);
        lc.q = (lc.a1 * lp.w_q).rowwise() + lp.b_q.row(0);
        lc.k = (lc.a1 * lp.w_k).rowwise() + lp.b_k.row(0);
        lc.v = (lc.a1 * lp.w_v).rowwise() + lp.b_v.row(0);
        lc.attn.assign(static_cast<std::size_t>(h), Eigen::MatrixXd());
        lc.concat.resize(m, d);
        for (int head = 0; head < h; ++head) {
            const auto qh = lc.q.middleCols(head * dh, dh);
            const auto kh = lc.k.middleCols(head * dh, dh);
            const auto vh = lc.v.middleCols(head * dh, dh);
            Eigen::MatrixXd s = qh * kh.transpose();
            if (p.cfg.positional == PositionalMode::RelativeBias) {
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j <= i; ++j) {
                        const int id = p.cfg.max_seq - 1 + j - i;
                        const auto src = p.cfg.bias_source == BiasSource::Query ? qh.row(i) : kh.row(j);
                        s(i, j) += src.dot(p.rel_emb.row(id));
                    }
                }
            }
            s *= scale;
            Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, m);
            for (int i = 0; i < m; ++i) {
                double mx = s(i, 0);
                for (int j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    a(i, j) = std::exp(s(i, j) - mx);
                    z += a(i, j);
                }
                for (int j = 0; j <= i; ++j) a(i, j) /= z;
            }
            lc.concat.middleCols(head * dh, dh) = a * vh;
            lc.attn[static_cast<std::size_t>(head)] = std::move(a);
        }
        const Eigen::MatrixXd attn_out = (lc.concat * lp.w_o).rowwise() + lp.b_o.row(0);
        lc.x_mid = x + attn_out;
        lc.a2 = layer_norm(lc.x_mid, lp.ln2_g, lp.ln2_b, lc.ln2);
        lc.f1 = (lc.a2 * lp.w_f1).rowwise() + lp.b_f1.row(0);
        lc.gact = lc.f1.unaryExpr([](double v) { return gelu(v); });
        const Eigen::MatrixXd ff_out = (lc.gact * lp.w_f2).rowwise() + lp.b_f2.row(0);
        lc.x_out = lc.x_mid + ff_out;
        x = lc.x_out;
        res.hidden.push_back(x);
        if (capture_attention) res.attention.push_back(lc.attn);
    }

    detail::LnCache lnf_local;
    detail::LnCache& lnf = cache ? cache->lnf : lnf_local;
    const Eigen::MatrixXd xf = layer_norm(x, p.lnf_g, p.lnf_b, lnf);
    res.logits = (xf * p.w_out).rowwise() + p.b_out.row(0);
    if (cache) {
        cache->xf = xf;
        cache->logits = res.logits;
    }
    return res;
}

}  // namespace detail

inline ForwardResult forward(const Parameters& p, const std::vector<int>& ids,
                             bool capture_attention = false) {
    return detail::forward_impl(p, ids, nullptr, capture_attention);
}

// Mean cross-entropy: logits row t scored against targets[t].
inline double lm_loss(const Eigen::MatrixXd& logits, const std::vector<int>& targets) {
    if (targets.empty()) throw DataError("no targets for the language-model loss");
    if (static_cast<Eigen::Index>(targets.size()) > logits.rows())
        throw DataError("more targets than logit rows");
    double total = 0.0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto row = logits.row(static_cast<Eigen::Index>(t));
        if (targets[t] < 0 || targets[t] >= logits.cols())
            throw DataError("target id out of range");
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        total += lse - row(targets[t]);
    }
    return total / static_cast<double>(targets.size());
}

// Next-token loss over one sequence: targets are the ids shifted by one.
inline double sequence_loss(const Eigen::MatrixXd& logits, const std::vector<int>& ids) {
    if (ids.size() < 2) throw DataError("need at least two tokens for a language-model loss");
    return lm_loss(logits, std::vector<int>(ids.begin() + 1, ids.end()));
}

inline double loss(const Parameters& p, const std::vector<int>& ids) {
    return sequence_loss(forward(p, ids).logits, ids);
}

// Backpropagation through the whole stack; gradients are accumulated
// into grad (shapes from zeros_like). Returns the sequence loss.
inline double loss_and_grad_accum(const Parameters& p, const std::vector<int>& ids,
                                  Parameters& grad) {
    detail::ForwardCache cache;
    detail::forward_impl(p, ids, &cache);
    const int m = static_cast<int>(ids.size());
    if (m < 2) throw DataError("need at least two tokens for a language-model loss");
    const int d = p.cfg.d_model();
    const int h = p.cfg.n_heads;
    const int dh = p.cfg.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double inv_targets = 1.0 / (m - 1);

    double total = 0.0;
    Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(m, p.cfg.vocab_size);
    for (int t = 0; t + 1 < m; ++t) {
        const auto row = cache.logits.row(t);
        const double mx = row.maxCoeff();
        const Eigen::RowVectorXd ex = (row.array() - mx).exp();
        const double z = ex.sum();
        total += mx + std::log(z) - row(ids[static_cast<std::size_t>(t) + 1]);
        dlogits.row(t) = ex / z * inv_targets;
        dlogits(t, ids[static_cast<std::size_t>(t) + 1]) -= inv_targets;
    }

    grad.w_out += cache.xf.transpose() * dlogits;
    grad.b_out += dlogits.colwise().sum();
    Eigen::MatrixXd dxf = dlogits * p.w_out.transpose();
    Eigen::MatrixXd dx = detail::layer_norm_backward(dxf, cache.lnf, p.lnf_g, grad.lnf_g, grad.lnf_b);

    for (int l = static_cast<int>(p.layers.size()) - 1; l >= 0; --l) {
        const LayerParams& lp = p.layers[static_cast<std::size_t>(l)];
        LayerParams& gl = grad.layers[static_cast<std::size_t>(l)];
        const detail::LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];

        // feed-forward branch
        const Eigen::MatrixXd& dxout = dx;
        gl.w_f2 += lc.gact.transpose() * dxout;
        gl.b_f2 += dxout.colwise().sum();
        Eigen::MatrixXd dg = dxout * lp.w_f2.transpose();
        Eigen::MatrixXd df1 =
            dg.cwiseProduct(lc.f1.unaryExpr([](double v) { return detail::gelu_grad(v); }));
        gl.w_f1 += lc.a2.transpose() * df1;
        gl.b_f1 += df1.colwise().sum();
        const Eigen::MatrixXd da2 = df1 * lp.w_f1.transpose();
        Eigen::MatrixXd dx_mid =
            detail::layer_norm_backward(da2, lc.ln2, lp.ln2_g, gl.ln2_g, gl.ln2_b);
        dx_mid += dxout;  // residual

        // attention branch
        const Eigen::MatrixXd& dattn_out = dx_mid;
        gl.w_o += lc.concat.transpose() * dattn_out;
        gl.b_o += dattn_out.colwise().sum();
        const Eigen::MatrixXd dconcat = dattn_out * lp.w_o.transpose();
        Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(m, d);
        Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(m, d);
        Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(m, d);
        for (int head = 0; head < h; ++head) {
            const auto qh = lc.q.middleCols(head * dh, dh);
            const auto kh = lc.k.middleCols(head * dh, dh);
            const auto vh = lc.v.middleCols(head * dh, dh);
            const Eigen::MatrixXd& a = lc.attn[static_cast<std::size_t>(head)];
            const auto doh = dconcat.middleCols(head * dh, dh);
            dv.middleCols(head * dh, dh) += a.transpose() * doh;
            const Eigen::MatrixXd da = doh * vh.transpose();
            // softmax rows: ds = a .* (da - rowsum(da .* a))
            Eigen::MatrixXd ds(m, m);
            for (int i = 0; i < m; ++i) {
                const double dot = da.row(i).cwiseProduct(a.row(i)).sum();
                ds.row(i) = a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
            }
            ds *= scale;  // gradient w.r.t. pre-scale scores (QK^T + bias)
            dq.middleCols(head * dh, dh) += ds * kh;
            dk.middleCols(head * dh, dh) += ds.transpose() * qh;
            if (p.cfg.positional == PositionalMode::RelativeBias) {
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j <= i; ++j) {
                        const int id = p.cfg.max_seq - 1 + j - i;
                        const double g = ds(i, j);
                        if (g == 0.0) continue;
                        if (p.cfg.bias_source == BiasSource::Query) {
                            dq.row(i).segment(head * dh, dh) += g * p.rel_emb.row(id);
                            grad.rel_emb.row(id) += g * qh.row(i);
                        } else {
                            dk.row(j).segment(head * dh, dh) += g * p.rel_emb.row(id);
                            grad.rel_emb.row(id) += g * kh.row(j);
                        }
                    }
                }
            }
        }
        gl.w_q += lc.a1.transpose() * dq;
        gl.b_q += dq.colwise().sum();
        gl.w_k += lc.a1.transpose() * dk;
        gl.b_k += dk.colwise().sum();
        gl.w_v += lc.a1.transpose() * dv;
        gl.b_v += dv.colwise().sum();
        const Eigen::MatrixXd da1 =
            dq * lp.w_q.transpose() + dk * lp.w_k.transpose() + dv * lp.w_v.transpose();
        Eigen::MatrixXd dx_in =
            detail::layer_norm_backward(da1, lc.ln1, lp.ln1_g, gl.ln1_g, gl.ln1_b);
        dx_in += dx_mid;  // residual
        dx = std::move(dx_in);
    }

    for (int t = 0; t < m; ++t) grad.tok_emb.row(ids[static_cast<std::size_t>(t)]) += dx.row(t);
    if (p.cfg.positional == PositionalMode::Absolute) grad.pos_emb.topRows(m) += dx;
    return total * inv_targets;
}

struct LossGrad {
    double loss;
    Parameters grad;
};

inline LossGrad loss_and_grad(const Parameters& p, const std::vector<int>& ids) {
    LossGrad out{0.0, zeros_like(p)};
    out.loss = loss_and_grad_accum(p, ids, out.grad);
    return out;
}

// Central-difference check of the analytic gradient at n_samples random
// coordinates; returns the worst relative error.
inline double gradient_check(const Parameters& p, const std::vector<int>& ids, int n_samples,
                             std::uint64_t seed) {
    const LossGrad lg = loss_and_grad(p, ids);
    Parameters work = p;
    std::vector<Eigen::MatrixXd*> work_tensors;
    work.visit([&](const std::string&, Eigen::MatrixXd& m) { work_tensors.push_back(&m); });
    std::vector<const Eigen::MatrixXd*> grad_tensors;
    lg.grad.visit(
        [&](const std::string&, const Eigen::MatrixXd& m) { grad_tensors.push_back(&m); });

    std::size_t total = 0;
    for (const auto* t : work_tensors) total += static_cast<std::size_t>(t->size());

    Rng rng(seed);
    const double h = 1e-4;
    double worst = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        auto flat = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
        std::size_t ti = 0;
        while (flat >= static_cast<std::size_t>(work_tensors[ti]->size())) {
            flat -= static_cast<std::size_t>(work_tensors[ti]->size());
            ++ti;
        }
        double* coeff = work_tensors[ti]->data() + flat;
        const double orig = *coeff;
        *coeff = orig + h;
        const double lp = loss(work, ids);
        *coeff = orig - h;
        const double lm = loss(work, ids);
        *coeff = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = grad_tensors[ti]->data()[flat];
        const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-8);
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
    return worst;
}

struct OptimizerSettings {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    int batch_size = 8;
    int epochs = 1;
    std::uint64_t seed = 1;
};

struct TrainLog {
    std::vector<std::pair<long, double>> step_loss;  // (step, mean batch loss)
    std::vector<double> epoch_loss;
};

// Adam with global-norm clipping over shuffled mini-batches of whole
// sequences. Sequential accumulation keeps runs bit-reproducible.
inline TrainLog train(Parameters& p, const std::vector<std::vector<int>>& rows,
                      const OptimizerSettings& opt) {
    if (rows.empty()) throw DataError("no training sequences");
    for (const auto& r : rows)
        if (r.size() < 2) throw DataError("training sequence shorter than two tokens");
    Parameters m_state = zeros_like(p);
    Parameters v_state = zeros_like(p);
    Rng rng(opt.seed);
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainLog log;
    long step = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_total = 0.0;
        std::size_t epoch_count = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            Parameters grad = zeros_like(p);
            double batch_total = 0.0;
            for (std::size_t i = start; i < stop; ++i)
                batch_total += loss_and_grad_accum(p, rows[order[i]], grad);
            const double inv_b = 1.0 / static_cast<double>(stop - start);
            double sq_norm = 0.0;
            grad.visit([&](const std::string&, Eigen::MatrixXd& g) {
                g *= inv_b;
                sq_norm += g.squaredNorm();
            });
            const double norm = std::sqrt(sq_norm);
            if (!std::isfinite(norm)) throw NumericError("gradient diverged during training");
            const double clip = opt.clip_norm > 0.0 && norm > opt.clip_norm ? opt.clip_norm / norm : 1.0;

            ++step;
            const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
            std::vector<Eigen::MatrixXd*> gs, ms, vs, ps;
            grad.visit([&](const std::string&, Eigen::MatrixXd& t) { gs.push_back(&t); });
            m_state.visit([&](const std::string&, Eigen::MatrixXd& t) { ms.push_back(&t); });
            v_state.visit([&](const std::string&, Eigen::MatrixXd& t) { vs.push_back(&t); });
            p.visit([&](const std::string&, Eigen::MatrixXd& t) { ps.push_back(&t); });
            for (std::size_t ti = 0; ti < gs.size(); ++ti) {
                Eigen::MatrixXd g = *gs[ti] * clip;
                *ms[ti] = opt.beta1 * *ms[ti] + (1.0 - opt.beta1) * g;
                *vs[ti] = opt.beta2 * *vs[ti] + (1.0 - opt.beta2) * g.cwiseProduct(g);
                const Eigen::MatrixXd mhat = *ms[ti] / bc1;
                const Eigen::MatrixXd vhat = *vs[ti] / bc2;
                *ps[ti] -= opt.lr * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + opt.eps).matrix());
            }
            const double mean_loss = batch_total / static_cast<double>(stop - start);
            log.step_loss.emplace_back(step, mean_loss);
            epoch_total += batch_total;
            epoch_count += stop - start;
        }
        log.epoch_loss.push_back(epoch_total / static_cast<double>(epoch_count));
    }
    return log;
}

// Train straight from an id stream, chunked into max_seq rows.
inline TrainLog train_stream(Parameters& p, const std::vector<int>& stream,
                             const OptimizerSettings& opt);

// Split one id stream into training rows of at most max_seq tokens;
// a trailing fragment is kept when it still supports a loss.
inline std::vector<std::vector<int>> make_sequences(const std::vector<int>& stream, int max_seq) {
    std::vector<std::vector<int>> rows;
    for (std::size_t start = 0; start < stream.size(); start += static_cast<std::size_t>(max_seq)) {
        const std::size_t stop = std::min(stream.size(), start + static_cast<std::size_t>(max_seq));
        if (stop - start >= 2)
            rows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                              stream.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    if (rows.empty()) throw DataError("stream too short to form any training sequence");
    return rows;
}

inline TrainLog train_stream(Parameters& p, const std::vector<int>& stream,
                             const OptimizerSettings& opt) {
    return train(p, make_sequences(stream, p.cfg.max_seq), opt);
}

// Context-limited training rows: for every token with at least k
// predecessors and one successor, emit
//   [<eos>, k context tokens, current, next, <sp>, <eos>]
// so each row has k+5 entries and the model never sees farther back
// than k tokens.
inline std::vector<std::vector<int>> make_context_batches(const std::vector<int>& stream, int k) {
    if (k < 1) throw ConfigError("context length k must be >= 1");
    std::vector<std::vector<int>> rows;
    const int n = static_cast<int>(stream.size());
    for (int t = k; t + 1 < n; ++t) {
        std::vector<int> row;
        row.reserve(static_cast<std::size_t>(k) + 5);
        row.push_back(corpus::Vocabulary::kDelimiterId);
        for (int i = t - k; i < t; ++i) row.push_back(stream[static_cast<std::size_t>(i)]);
        row.push_back(stream[static_cast<std::size_t>(t)]);
        row.push_back(stream[static_cast<std::size_t>(t) + 1]);
        row.push_back(corpus::Vocabulary::kSpaceId);
        row.push_back(corpus::Vocabulary::kDelimiterId);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError("stream too short for context length " + std::to_string(k));
    return rows;
}

inline void save_checkpoint(const std::filesystem::path& path, const Parameters& p,
                            const io::json& meta = io::json::object()) {
    std::vector<io::NamedTensor> tensors;
    p.visit([&](const std::string& name, const Eigen::MatrixXd& m) {
        tensors.push_back({name, m});
    });
    io::json header;
    header["format_version"] = 1;
    header["kind"] = "minigpt";
    header["config"] = p.cfg.to_json();
    header["meta"] = meta;
    io::write_checkpoint(path, header, tensors);
}

inline Parameters load_checkpoint(const std::filesystem::path& path, io::json* meta_out = nullptr) {
    std::vector<io::NamedTensor> tensors;
    const io::json header = io::read_checkpoint(path, tensors);
    if (header.value("kind", "") != "minigpt")
        throw DataError(path.string() + ": not a minigpt checkpoint");
    Parameters p = init_parameters(ModelConfig::from_json(header.at("config")));
    std::size_t cursor = 0;
    bool ok = true;
    p.visit([&](const std::string& name, Eigen::MatrixXd& m) {
        if (cursor >= tensors.size() || tensors[cursor].name != name ||
            tensors[cursor].value.rows() != m.rows() || tensors[cursor].value.cols() != m.cols()) {
            ok = false;
        } else {
            m = tensors[cursor].value;
        }
        ++cursor;
    });
    if (!ok || cursor != tensors.size())
        throw DataError(path.string() + ": checkpoint tensors do not match the model layout");
    if (meta_out) *meta_out = header.value("meta", io::json::object());
    return p;
}

// Hidden-state layer used for embeddings when none is requested:
// three quarters of the stack, e.g. layer 3 of 4.
inline int default_layer(int n_layers) {
    return static_cast<int>(std::ceil(0.75 * n_layers));
}

}  // namespace irnlm::minigpt
