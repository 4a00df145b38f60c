#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/io.hpp"

namespace irnlm::corpus {

// A token of the annotated stimulus stream. Morphological features are a
// single string of attribute=value pairs joined by '|' in attribute order,
// or "_" when the token has none. ncn is the number of syntactic
// constituents whose span ends at this word.
struct AnnotatedToken {
    std::string surface;
    std::string pos;
    std::string morph;
    int ncn = 0;
    bool is_content = false;
    double onset_s = 0.0;
    double offset_s = 0.0;
    int run_id = 1;  // 1-based
};

struct AnnotatedCorpus {
    std::vector<AnnotatedToken> tokens;
    int n_runs = 0;

    std::vector<int> run_token_indices(int run_id) const {
        std::vector<int> out;
        for (std::size_t i = 0; i < tokens.size(); ++i)
            if (tokens[i].run_id == run_id) out.push_back(static_cast<int>(i));
        return out;
    }
};

namespace detail {

inline int parse_int(const std::string& s, std::size_t line_no, const char* what) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
    }
}

inline double parse_double(const std::string& s, std::size_t line_no, const char* what) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
    }
}

}  // namespace detail

// Columns: surface pos morph ncn is_content onset_s offset_s run_id
inline AnnotatedCorpus parse_annotated(const std::vector<io::TsvRow>& rows,
                                       const std::string& name) {
    AnnotatedCorpus out;
    std::map<int, double> last_offset;
    for (const auto& row : rows) {
        if (row.fields.size() != 8)
            throw DataError(name + " line " + std::to_string(row.line_no) + ": expected 8 columns, got " +
                            std::to_string(row.fields.size()));
        AnnotatedToken t;
        t.surface = row.fields[0];
        t.pos = row.fields[1];
        t.morph = row.fields[2];
        t.ncn = detail::parse_int(row.fields[3], row.line_no, "ncn");
        const std::string& flag = row.fields[4];
        if (flag == "0")
            t.is_content = false;
        else if (flag == "1")
            t.is_content = true;
        else
            throw DataError(name + " line " + std::to_string(row.line_no) + ": is_content must be 0 or 1");
        t.onset_s = detail::parse_double(row.fields[5], row.line_no, "onset_s");
        t.offset_s = detail::parse_double(row.fields[6], row.line_no, "offset_s");
        t.run_id = detail::parse_int(row.fields[7], row.line_no, "run_id");
        if (t.surface.empty())
            throw DataError(name + " line " + std::to_string(row.line_no) + ": empty surface form");
        if (t.ncn < 0)
            throw DataError(name + " line " + std::to_string(row.line_no) + ": negative ncn");
        if (t.offset_s < t.onset_s)
            throw DataError(name + " line " + std::to_string(row.line_no) + ": offset before onset");
        if (t.run_id < 1)
            throw DataError(name + " line " + std::to_string(row.line_no) + ": run_id must be >= 1");
        auto [it, inserted] = last_offset.try_emplace(t.run_id, t.offset_s);
        if (!inserted) {
            if (t.onset_s < it->second)
                throw DataError(name + " line " + std::to_string(row.line_no) +
                                ": token onset moves backwards within run " + std::to_string(t.run_id));
            it->second = t.offset_s;
        }
        out.tokens.push_back(std::move(t));
    }
    if (out.tokens.empty()) return out;  // an empty file is an empty corpus
    int max_run = 0;
    std::set<int> seen;
    for (const auto& t : out.tokens) {
        seen.insert(t.run_id);
        max_run = std::max(max_run, t.run_id);
    }
    for (int r = 1; r <= max_run; ++r)
        if (!seen.count(r)) throw DataError(name + ": run ids not contiguous, missing run " + std::to_string(r));
    out.n_runs = max_run;
    return out;
}

inline AnnotatedCorpus ingest_annotated(const std::filesystem::path& path) {
    return parse_annotated(io::read_tsv(path), path.filename().string());
}

inline void save_annotated(const std::filesystem::path& path, const AnnotatedCorpus& c) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "# surface\tpos\tmorph\tncn\tis_content\tonset_s\toffset_s\trun_id\n";
    for (const auto& t : c.tokens) {
        std::ostringstream line;
        line.precision(6);
        line << std::fixed;
        line << t.surface << '\t' << t.pos << '\t' << t.morph << '\t' << t.ncn << '\t'
             << (t.is_content ? 1 : 0) << '\t' << t.onset_s << '\t' << t.offset_s << '\t' << t.run_id;
        os << line.str() << '\n';
    }
    if (!os) throw DataError("write failed: " + path.string());
}

// Number of closing constituent nodes per word of one bracketed tree:
// for each leaf, how many constituents end there, i.e. how many ')'
// follow it before the next leaf. Leaves are the non-label atoms; the
// atom right after '(' is the constituent label.
inline std::vector<int> closing_nodes(const std::string& tree) {
    std::vector<int> counts;
    int depth = 0;
    bool expect_label = false;
    bool saw_root = false;
    std::size_t i = 0;
    const auto fail = [&](const std::string& msg) {
        throw DataError("bad tree near position " + std::to_string(i) + ": " + msg);
    };
    while (i < tree.size()) {
        const char c = tree[i];
        if (c == ' ' || c == '\t') {
            ++i;
        } else if (c == '(') {
            if (saw_root && depth == 0) fail("multiple roots");
            ++depth;
            saw_root = true;
            expect_label = true;
            ++i;
        } else if (c == ')') {
            if (depth == 0) fail("unbalanced ')'");
            if (expect_label) fail("empty constituent");
            --depth;
            if (counts.empty()) fail("constituent closes before any word");
            ++counts.back();
            ++i;
        } else {
            while (i < tree.size() && tree[i] != '(' && tree[i] != ')' && tree[i] != ' ' && tree[i] != '\t') ++i;
            if (depth == 0) fail("word outside any constituent");
            if (expect_label)
                expect_label = false;  // constituent label, not a word
            else
                counts.push_back(0);
        }
    }
    if (depth != 0) throw DataError("bad tree: unbalanced '('");
    if (counts.empty()) throw DataError("bad tree: no words");
    return counts;
}

inline std::vector<int> closing_nodes(const std::string& tree, int leaf_count) {
    std::vector<int> counts = closing_nodes(tree);
    if (static_cast<int>(counts.size()) != leaf_count)
        throw DataError("tree has " + std::to_string(counts.size()) + " words, expected " +
                        std::to_string(leaf_count));
    return counts;
}

// Recompute ncn from one tree per sentence and check it against the
// annotation; trees consume corpus tokens in order.
inline void verify_ncn(const AnnotatedCorpus& c, const std::vector<std::string>& trees) {
    std::size_t pos = 0;
    for (std::size_t s = 0; s < trees.size(); ++s) {
        const std::vector<int> counts = closing_nodes(trees[s]);
        if (pos + counts.size() > c.tokens.size())
            throw DataError("tree " + std::to_string(s + 1) + " has more words than remaining tokens");
        for (std::size_t k = 0; k < counts.size(); ++k) {
            if (c.tokens[pos + k].ncn != counts[k])
                throw DataError("tree " + std::to_string(s + 1) + " word " + std::to_string(k + 1) +
                                ": ncn " + std::to_string(counts[k]) + " disagrees with annotation " +
                                std::to_string(c.tokens[pos + k].ncn));
        }
        pos += counts.size();
    }
    if (pos != c.tokens.size())
        throw DataError("trees cover " + std::to_string(pos) + " words but corpus has " +
                        std::to_string(c.tokens.size()) + " tokens");
}

inline std::vector<std::string> read_trees(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path.string());
    std::vector<std::string> trees;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        trees.push_back(line);
    }
    return trees;
}

// The three information-restricted views of the corpus.
// Integral keeps every surface form; Semantic keeps surface forms of
// content words only; Syntactic replaces every token with its
// pos|morph|ncn triplet.
enum class Mode { Integral, Semantic, Syntactic };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::Integral: return "integral";
        case Mode::Semantic: return "semantic";
        case Mode::Syntactic: return "syntactic";
    }
    throw ConfigError("bad mode");
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "integral") return Mode::Integral;
    if (s == "semantic") return Mode::Semantic;
    if (s == "syntactic") return Mode::Syntactic;
    throw ConfigError("unknown mode '" + s + "' (expected integral, semantic or syntactic)");
}

inline std::string syntactic_feature(const AnnotatedToken& t) {
    return t.pos + "|" + t.morph + "|" + std::to_string(t.ncn);
}

struct FeatureStream {
    Mode mode = Mode::Integral;
    std::vector<std::string> items;
    std::vector<int> alignment;  // index into the source corpus per item
    int n_source_tokens = 0;
};

inline FeatureStream restrict_stream(const AnnotatedCorpus& c, Mode mode) {
    FeatureStream out;
    out.mode = mode;
    out.n_source_tokens = static_cast<int>(c.tokens.size());
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        const AnnotatedToken& t = c.tokens[i];
        switch (mode) {
            case Mode::Integral:
                out.items.push_back(t.surface);
                out.alignment.push_back(static_cast<int>(i));
                break;
            case Mode::Semantic:
                if (t.is_content) {
                    out.items.push_back(t.surface);
                    out.alignment.push_back(static_cast<int>(i));
                }
                break;
            case Mode::Syntactic:
                out.items.push_back(syntactic_feature(t));
                out.alignment.push_back(static_cast<int>(i));
                break;
        }
    }
    if (out.items.empty()) throw DataError("restriction produced an empty stream");
    return out;
}

inline void save_stream(const FeatureStream& s, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "# mode=" << mode_name(s.mode) << '\n';
    os << "# n_source_tokens=" << s.n_source_tokens << '\n';
    for (std::size_t i = 0; i < s.items.size(); ++i)
        os << s.items[i] << '\t' << s.alignment[i] << '\n';
    if (!os) throw DataError("write failed: " + path.string());
}

inline FeatureStream load_stream(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path.string());
    FeatureStream s;
    std::string line;
    std::size_t line_no = 0;
    bool saw_mode = false, saw_count = false;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto where = [&](const char* key) { return line.find(key); };
            if (auto at = where("mode="); at != std::string::npos) {
                s.mode = mode_from_name(line.substr(at + 5));
                saw_mode = true;
            } else if (auto at2 = where("n_source_tokens="); at2 != std::string::npos) {
                s.n_source_tokens = std::stoi(line.substr(at2 + 16));
                saw_count = true;
            }
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": expected item<TAB>source_index");
        s.items.push_back(line.substr(0, tab));
        try {
            s.alignment.push_back(std::stoi(line.substr(tab + 1)));
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": bad source index '" + line.substr(tab + 1) + "'");
        }
        if (s.alignment.back() < 0)
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": negative source index");
    }
    if (!saw_mode || !saw_count)
        throw DataError(path.string() + ": missing '# mode=' or '# n_source_tokens=' header");
    if (s.items.empty()) throw DataError(path.string() + ": stream has no items");
    for (const int a : s.alignment)
        if (a >= s.n_source_tokens)
            throw DataError(path.string() + ": source index exceeds n_source_tokens");
    return s;
}

// Vocabulary over one restricted stream. Ids 0..2 are reserved for the
// sequence delimiter, the unknown-feature id and the inter-word space
// used by the context-limited training rows; real features follow by
// descending frequency, ties broken lexicographically.
class Vocabulary {
public:
    static constexpr int kDelimiterId = 0;
    static constexpr int kUnknownId = 1;
    static constexpr int kSpaceId = 2;
    static constexpr const char* kDelimiter = "<eos>";
    static constexpr const char* kUnknown = "<unk>";
    static constexpr const char* kSpace = "<sp>";

    Vocabulary() = default;
    Vocabulary(Mode mode, std::vector<std::string> features) : mode_(mode) {
        id_to_feature_ = {kDelimiter, kUnknown, kSpace};
        id_to_feature_.insert(id_to_feature_.end(), features.begin(), features.end());
        for (std::size_t i = 0; i < id_to_feature_.size(); ++i) {
            if (!feature_to_id_.emplace(id_to_feature_[i], static_cast<int>(i)).second)
                throw DataError("duplicate vocabulary feature '" + id_to_feature_[i] + "'");
        }
    }

    int size() const { return static_cast<int>(id_to_feature_.size()); }
    Mode mode() const { return mode_; }

    int id_of(const std::string& feature) const {
        auto it = feature_to_id_.find(feature);
        return it == feature_to_id_.end() ? kUnknownId : it->second;
    }

    const std::string& feature_of(int id) const {
        if (id < 0 || id >= size()) throw DataError("vocabulary id out of range: " + std::to_string(id));
        return id_to_feature_[static_cast<std::size_t>(id)];
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path);
        if (!os) throw DataError("cannot open for writing: " + path.string());
        os << "# mode=" << mode_name(mode_) << '\n';
        for (std::size_t i = 0; i < id_to_feature_.size(); ++i)
            os << i << '\t' << id_to_feature_[i] << '\n';
        if (!os) throw DataError("write failed: " + path.string());
    }

    static Vocabulary load(const std::filesystem::path& path) {
        // The mode comment is advisory; ids must be dense and in order.
        std::ifstream is(path);
        if (!is) throw DataError("cannot open: " + path.string());
        Vocabulary v;
        std::string line;
        std::size_t line_no = 0;
        int expected = 0;
        while (std::getline(is, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (line[0] == '#') {
                const std::string key = "# mode=";
                if (line.rfind(key, 0) == 0) v.mode_ = mode_from_name(line.substr(key.size()));
                continue;
            }
            const std::size_t tab = line.find('\t');
            if (tab == std::string::npos)
                throw DataError(path.string() + " line " + std::to_string(line_no) + ": expected id<TAB>feature");
            const int id = detail::parse_int(line.substr(0, tab), line_no, "vocabulary id");
            if (id != expected)
                throw DataError(path.string() + " line " + std::to_string(line_no) + ": ids must be dense, expected " +
                                std::to_string(expected));
            ++expected;
            v.id_to_feature_.push_back(line.substr(tab + 1));
        }
        if (v.id_to_feature_.size() < 3 || v.id_to_feature_[0] != kDelimiter ||
            v.id_to_feature_[1] != kUnknown || v.id_to_feature_[2] != kSpace)
            throw DataError(path.string() + ": reserved ids 0..2 must be <eos>, <unk>, <sp>");
        for (std::size_t i = 0; i < v.id_to_feature_.size(); ++i)
            if (!v.feature_to_id_.emplace(v.id_to_feature_[i], static_cast<int>(i)).second)
                throw DataError(path.string() + ": duplicate feature '" + v.id_to_feature_[i] + "'");
        return v;
    }

private:
    Mode mode_ = Mode::Integral;
    std::vector<std::string> id_to_feature_;
    std::unordered_map<std::string, int> feature_to_id_;
};

inline Vocabulary build_vocabulary(const std::vector<FeatureStream>& streams) {
    if (streams.empty()) throw DataError("no streams to build a vocabulary from");
    const Mode mode = streams[0].mode;
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& stream : streams) {
        if (stream.mode != mode) throw DataError("streams of mixed modes in one vocabulary");
        for (const auto& item : stream.items) ++counts[item];
    }
    std::vector<std::pair<std::string, std::int64_t>> entries(counts.begin(), counts.end());
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> features;
    features.reserve(entries.size());
    for (auto& [feature, n] : entries) {
        if (feature == Vocabulary::kDelimiter || feature == Vocabulary::kUnknown ||
            feature == Vocabulary::kSpace)
            throw DataError("stream contains reserved feature '" + feature + "'");
        features.push_back(feature);
    }
    return Vocabulary(mode, std::move(features));
}

inline Vocabulary build_vocabulary(const FeatureStream& stream) {
    return build_vocabulary(std::vector<FeatureStream>{stream});
}

inline std::vector<int> encode_ids(const FeatureStream& stream, const Vocabulary& vocab) {
    std::vector<int> ids;
    ids.reserve(stream.items.size());
    for (const auto& item : stream.items) ids.push_back(vocab.id_of(item));
    return ids;
}

// Default content-word rule used by the synthetic grammar: open-class
// parts of speech, minus auxiliaries and copulas which carry little
// lexical meaning of their own.
inline bool default_is_content(const std::string& pos, const std::string& surface) {
    static const std::set<std::string> open_class = {"NOUN", "PROPN", "VERB", "ADJ", "ADV", "NUM"};
    static const std::set<std::string> stop = {"be", "is", "are", "was", "were", "been",
                                               "have", "has", "had", "do", "does", "did"};
    if (!open_class.count(pos)) return false;
    std::string lower = surface;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return !stop.count(lower);
}

}  // namespace irnlm::corpus
