#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/corpus.hpp"
#include "irnlm/io.hpp"

namespace irnlm::glove {

// Symmetric co-occurrence counts with 1/distance weighting inside a
// fixed window; windows do not cross document (run) boundaries.
class CoocMatrix {
public:
    struct Entry {
        int row;
        int col;
        double value;
    };

    CoocMatrix() = default;
    explicit CoocMatrix(int vocab_size) : vocab_size_(vocab_size) {}

    int vocab_size() const { return vocab_size_; }

    void add(int i, int j, double w) {
        if (i < 0 || i >= vocab_size_ || j < 0 || j >= vocab_size_)
            throw DataError("co-occurrence id out of vocabulary range");
        cells_[key(i, j)] += w;
    }

    double at(int i, int j) const {
        auto it = cells_.find(key(i, j));
        return it == cells_.end() ? 0.0 : it->second;
    }

    std::size_t n_nonzero() const { return cells_.size(); }

    // cells in (row, col) order so downstream iteration is reproducible
    std::vector<Entry> sorted_entries() const {
        std::vector<Entry> out;
        out.reserve(cells_.size());
        for (const auto& [k, v] : cells_)
            out.push_back({static_cast<int>(k >> 32), static_cast<int>(k & 0xffffffffULL), v});
        std::sort(out.begin(), out.end(), [](const Entry& a, const Entry& b) {
            return a.row != b.row ? a.row < b.row : a.col < b.col;
        });
        return out;
    }

private:
    static std::uint64_t key(int i, int j) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) << 32) |
               static_cast<std::uint32_t>(j);
    }

    int vocab_size_ = 0;
    std::unordered_map<std::uint64_t, double> cells_;
};

inline CoocMatrix build_cooccurrence(const std::vector<std::vector<int>>& documents,
                                     int window, int vocab_size) {
    if (window < 1) throw ConfigError("co-occurrence window must be >= 1");
    CoocMatrix m(vocab_size);
    for (const auto& doc : documents) {
        const int n = static_cast<int>(doc.size());
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < std::min(n, i + window + 1); ++j) {
                const double w = 1.0 / static_cast<double>(j - i);
                m.add(doc[static_cast<std::size_t>(i)], doc[static_cast<std::size_t>(j)], w);
                m.add(doc[static_cast<std::size_t>(j)], doc[static_cast<std::size_t>(i)], w);
            }
        }
    }
    return m;
}

struct GloveConfig {
    int dim = 16;
    int epochs = 23;
    double lr = 0.05;
    double x_max = 100.0;
    double alpha = 0.75;
    std::uint64_t seed = 1;
};

// Word and context vectors with their biases; the published embedding is
// the sum w + wc per word.
struct GloveModel {
    Eigen::MatrixXd w;   // vocab x dim
    Eigen::MatrixXd wc;  // vocab x dim
    Eigen::VectorXd b;
    Eigen::VectorXd bc;
};

inline double cooc_weight(double x, double x_max, double alpha) {
    return x < x_max ? std::pow(x / x_max, alpha) : 1.0;
}

// J = sum over nonzero cells of f(x) * (w_i . wc_j + b_i + bc_j - ln x)^2
inline double glove_loss(const CoocMatrix& cooc, const GloveModel& m, const GloveConfig& cfg) {
    double loss = 0.0;
    for (const auto& e : cooc.sorted_entries()) {
        const double diff = m.w.row(e.row).dot(m.wc.row(e.col)) + m.b(e.row) + m.bc(e.col) -
                            std::log(e.value);
        loss += cooc_weight(e.value, cfg.x_max, cfg.alpha) * diff * diff;
    }
    return loss;
}

struct GloveTrainResult {
    GloveModel model;
    std::vector<double> epoch_loss;  // J before training, then after each epoch
};

// AdaGrad on the weighted least-squares objective; cell order is a
// seeded shuffle per epoch, so a seed fixes the whole trajectory.
inline GloveTrainResult train_glove(const CoocMatrix& cooc, const GloveConfig& cfg) {
    if (cfg.dim < 1) throw ConfigError("embedding dim must be >= 1");
    if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
    const int v = cooc.vocab_size();
    if (v < 1) throw DataError("empty vocabulary");
    if (cooc.n_nonzero() == 0) throw DataError("co-occurrence matrix has no nonzero cells");

    Rng rng(cfg.seed);
    GloveModel m;
    m.w.resize(v, cfg.dim);
    m.wc.resize(v, cfg.dim);
    m.b.resize(v);
    m.bc.resize(v);
    const double r = 0.5 / cfg.dim;
    for (int i = 0; i < v; ++i) {
        for (int d = 0; d < cfg.dim; ++d) m.w(i, d) = rng.uniform(-r, r);
        for (int d = 0; d < cfg.dim; ++d) m.wc(i, d) = rng.uniform(-r, r);
        m.b(i) = rng.uniform(-r, r);
        m.bc(i) = rng.uniform(-r, r);
    }
    Eigen::MatrixXd gw = Eigen::MatrixXd::Ones(v, cfg.dim);
    Eigen::MatrixXd gwc = Eigen::MatrixXd::Ones(v, cfg.dim);
    Eigen::VectorXd gb = Eigen::VectorXd::Ones(v);
    Eigen::VectorXd gbc = Eigen::VectorXd::Ones(v);

    const auto entries = cooc.sorted_entries();
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    GloveTrainResult out;
    out.epoch_loss.push_back(glove_loss(cooc, m, cfg));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (const std::size_t idx : order) {
            const auto& e = entries[idx];
            const int i = e.row, j = e.col;
            const double f = cooc_weight(e.value, cfg.x_max, cfg.alpha);
            const double diff = m.w.row(i).dot(m.wc.row(j)) + m.b(i) + m.bc(j) - std::log(e.value);
            const double scale = 2.0 * f * diff;
            for (int d = 0; d < cfg.dim; ++d) {
                const double grad_w = scale * m.wc(j, d);
                const double grad_wc = scale * m.w(i, d);
                m.w(i, d) -= cfg.lr * grad_w / std::sqrt(gw(i, d));
                m.wc(j, d) -= cfg.lr * grad_wc / std::sqrt(gwc(j, d));
                gw(i, d) += grad_w * grad_w;
                gwc(j, d) += grad_wc * grad_wc;
            }
            m.b(i) -= cfg.lr * scale / std::sqrt(gb(i));
            m.bc(j) -= cfg.lr * scale / std::sqrt(gbc(j));
            gb(i) += scale * scale;
            gbc(j) += scale * scale;
            if (!std::isfinite(diff)) throw NumericError("glove training diverged");
        }
        out.epoch_loss.push_back(glove_loss(cooc, m, cfg));
    }
    out.model = std::move(m);
    return out;
}

// One static vector per vocabulary id, with the summed biases kept in
// memory for inspection. Rows for ids that never co-occurred (including
// the reserved ids) keep their random initialisation sum. Only the
// matrix is serialized.
struct EmbeddingTable {
    Eigen::MatrixXd vectors;  // vocab x dim
    Eigen::VectorXd bias;     // vocab, not serialized

    int rows() const { return static_cast<int>(vectors.rows()); }
    int dim() const { return static_cast<int>(vectors.cols()); }

    void save(const std::filesystem::path& path) const { io::write_matrix(path, vectors); }
    static EmbeddingTable load(const std::filesystem::path& path) {
        EmbeddingTable t;
        t.vectors = io::read_matrix(path);
        t.bias = Eigen::VectorXd::Zero(t.vectors.rows());
        return t;
    }

    void save_csv(const std::filesystem::path& path, const corpus::Vocabulary& vocab) const {
        if (vocab.size() != rows()) throw DataError("vocabulary size does not match embedding rows");
        std::ofstream os(path);
        if (!os) throw DataError("cannot open for writing: " + path.string());
        os.precision(9);
        for (int i = 0; i < rows(); ++i) {
            os << vocab.feature_of(i);
            for (int d = 0; d < dim(); ++d) os << ',' << vectors(i, d);
            os << '\n';
        }
        if (!os) throw DataError("write failed: " + path.string());
    }
};

inline EmbeddingTable embedding_table(const GloveModel& m) {
    return EmbeddingTable{m.w + m.wc, m.b + m.bc};
}

}  // namespace irnlm::glove
