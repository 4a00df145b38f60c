#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/corpus.hpp"
#include "irnlm/glove.hpp"
#include "irnlm/io.hpp"
#include "irnlm/minigpt.hpp"

namespace irnlm::embed {

// One embedding row per stream item, with the index of the source
// corpus token each row describes.
struct EmbeddingMatrix {
    Eigen::MatrixXd x;
    std::vector<int> alignment;
    int n_source_tokens = 0;
    io::json meta = io::json::object();

    int rows() const { return static_cast<int>(x.rows()); }
    int dim() const { return static_cast<int>(x.cols()); }

    void save(const std::filesystem::path& path) const {
        io::write_matrix(path, x);
        io::json side;
        side["n_source_tokens"] = n_source_tokens;
        side["alignment"] = alignment;
        side["meta"] = meta;
        io::write_json(path.string() + ".json", side);
    }

    static EmbeddingMatrix load(const std::filesystem::path& path) {
        EmbeddingMatrix em;
        em.x = io::read_matrix(path);
        const io::json side = io::read_json(path.string() + ".json");
        em.n_source_tokens = side.at("n_source_tokens").get<int>();
        em.alignment = side.at("alignment").get<std::vector<int>>();
        em.meta = side.value("meta", io::json::object());
        if (static_cast<int>(em.alignment.size()) != em.rows())
            throw DataError(path.string() + ": alignment length does not match matrix rows");
        return em;
    }
};

// Static lookup: each stream item gets its vocabulary row.
inline EmbeddingMatrix extract_static(const corpus::FeatureStream& stream,
                                      const corpus::Vocabulary& vocab,
                                      const glove::EmbeddingTable& table) {
    if (table.rows() != vocab.size())
        throw DataError("embedding table rows do not match vocabulary size");
    EmbeddingMatrix em;
    em.n_source_tokens = stream.n_source_tokens;
    em.alignment = stream.alignment;
    em.x.resize(static_cast<Eigen::Index>(stream.items.size()), table.dim());
    for (std::size_t i = 0; i < stream.items.size(); ++i)
        em.x.row(static_cast<Eigen::Index>(i)) = table.vectors.row(vocab.id_of(stream.items[i]));
    em.meta = {{"model", ""}, {"layer", 0}, {"protocol", "static"}, {"k_or_N", 0}};
    return em;
}

namespace detail {

inline void check_layer(const minigpt::Parameters& p, int layer) {
    if (layer < 1 || layer > p.cfg.n_layers)
        throw ConfigError("layer must be in 1.." + std::to_string(p.cfg.n_layers));
}

}  // namespace detail

// Sliding-window hidden states: the state of token t is read at its own
// position inside a window that ends one token after t (t is next to
// last), clipped to window_n tokens. With window_n >= stream length + 1
// this reproduces a single full pass exactly.
inline EmbeddingMatrix extract_sliding(const std::vector<int>& ids,
                                       const minigpt::Parameters& p, int window_n, int layer,
                                       std::vector<int> alignment = {}) {
    detail::check_layer(p, layer);
    if (window_n < 2) throw ConfigError("sliding window must cover at least 2 tokens");
    if (window_n > p.cfg.max_seq)
        throw ConfigError("window " + std::to_string(window_n) + " exceeds the model's max_seq " +
                          std::to_string(p.cfg.max_seq));
    const int len = static_cast<int>(ids.size());
    if (len == 0) throw DataError("empty id stream");
    EmbeddingMatrix em;
    em.x.resize(len, p.cfg.d_model());
    for (int t = 0; t < len; ++t) {
        const int end = std::min(t + 1, len - 1);
        const int start = std::max(0, end - (window_n - 1));
        const std::vector<int> window(ids.begin() + start, ids.begin() + end + 1);
        const minigpt::ForwardResult fr = minigpt::forward(p, window);
        em.x.row(t) = fr.hidden[static_cast<std::size_t>(layer - 1)].row(t - start);
    }
    if (alignment.empty()) {
        alignment.resize(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) alignment[static_cast<std::size_t>(i)] = i;
    }
    if (static_cast<int>(alignment.size()) != len)
        throw DataError("alignment length does not match id stream");
    em.alignment = std::move(alignment);
    em.n_source_tokens = *std::max_element(em.alignment.begin(), em.alignment.end()) + 1;
    em.meta = {{"model", ""}, {"layer", layer}, {"protocol", "sliding"}, {"k_or_N", window_n}};
    return em;
}

// Context-limited hidden states: token t is embedded from the row
// [<eos>, up to k predecessors, t] at the position of t. By causal
// masking this equals the state the model produced for t inside its
// k+5 training rows.
inline EmbeddingMatrix extract_context_limited(const std::vector<int>& ids,
                                               const minigpt::Parameters& p, int k, int layer,
                                               std::optional<int> trained_k = std::nullopt,
                                               std::vector<int> alignment = {}) {
    detail::check_layer(p, layer);
    if (k < 1) throw ConfigError("context length k must be >= 1");
    if (trained_k && *trained_k != k)
        throw ConfigError("model was trained with context length " + std::to_string(*trained_k) +
                          ", requested " + std::to_string(k));
    const int len = static_cast<int>(ids.size());
    if (len == 0) throw DataError("empty id stream");
    EmbeddingMatrix em;
    em.x.resize(len, p.cfg.d_model());
    for (int t = 0; t < len; ++t) {
        std::vector<int> row;
        row.reserve(static_cast<std::size_t>(k) + 2);
        row.push_back(corpus::Vocabulary::kDelimiterId);
        for (int i = std::max(0, t - k); i <= t; ++i) row.push_back(ids[static_cast<std::size_t>(i)]);
        const minigpt::ForwardResult fr = minigpt::forward(p, row);
        em.x.row(t) = fr.hidden[static_cast<std::size_t>(layer - 1)].row(
            static_cast<Eigen::Index>(row.size()) - 1);
    }
    if (alignment.empty()) {
        alignment.resize(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) alignment[static_cast<std::size_t>(i)] = i;
    }
    if (static_cast<int>(alignment.size()) != len)
        throw DataError("alignment length does not match id stream");
    em.alignment = std::move(alignment);
    em.n_source_tokens = *std::max_element(em.alignment.begin(), em.alignment.end()) + 1;
    em.meta = {{"model", ""}, {"layer", layer}, {"protocol", "context_limited"}, {"k_or_N", k}};
    return em;
}

// Spread rows onto the full token grid; tokens without a row (e.g.
// function words under the semantic restriction) get zero vectors.
inline EmbeddingMatrix scatter_to_tokens(const EmbeddingMatrix& em, int n_tokens) {
    if (n_tokens < em.n_source_tokens)
        throw DataError("target token count smaller than the stream's source token count");
    EmbeddingMatrix out;
    out.x = Eigen::MatrixXd::Zero(n_tokens, em.dim());
    for (int r = 0; r < em.rows(); ++r) {
        const int t = em.alignment[static_cast<std::size_t>(r)];
        if (t < 0 || t >= n_tokens) throw DataError("alignment index out of range");
        out.x.row(t) = em.x.row(r);
    }
    out.alignment.resize(static_cast<std::size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i) out.alignment[static_cast<std::size_t>(i)] = i;
    out.n_source_tokens = n_tokens;
    out.meta = em.meta;
    out.meta["scattered"] = true;
    return out;
}

// Column-wise concatenation on the shared token grid.
inline EmbeddingMatrix concat_features(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    const int n = std::max(a.n_source_tokens, b.n_source_tokens);
    const EmbeddingMatrix fa = scatter_to_tokens(a, n);
    const EmbeddingMatrix fb = scatter_to_tokens(b, n);
    EmbeddingMatrix out;
    out.x.resize(n, fa.dim() + fb.dim());
    out.x << fa.x, fb.x;
    out.alignment = fa.alignment;
    out.n_source_tokens = n;
    out.meta = {{"protocol", "concat"}, {"left", a.meta}, {"right", b.meta}};
    return out;
}

}  // namespace irnlm::embed
