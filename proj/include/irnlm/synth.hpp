#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/corpus.hpp"
#include "irnlm/encoding.hpp"
#include "irnlm/io.hpp"
#include "irnlm/stats.hpp"

namespace irnlm::synth {

// ---------------------------------------------------------------------
// Synthetic annotated corpus
//
// Sentences come from a small set of template families. Each family has
// two bracketing variants that share the exact same surface token
// sequence, so the closing-node count of every content word stays
// genuinely ambiguous (50/50) for any model that sees only the words,
// while part of speech and morphology remain fully recoverable. Lexeme
// choices are independent of the template, so the reverse holds too:
// the syntactic stream carries no information about semantic categories.
// ---------------------------------------------------------------------

struct GrammarConfig {
    int grammar_size = 5;       // lexemes per semantic category
    double speech_rate_s = 0.3; // seconds per token
    double sentence_gap_s = 0.2;
};

namespace detail {

struct TagInfo {
    const char* pos;
    const char* morph;
    bool content;
};

inline TagInfo tag_info(const std::string& tag) {
    if (tag == "DT") return {"DET", "Definite=Def|PronType=Art", false};
    if (tag == "NN") return {"NOUN", "Number=Sing", true};
    if (tag == "VB") return {"VERB", "Tense=Past|VerbForm=Fin", true};
    if (tag == "JJ") return {"ADJ", "Degree=Pos", true};
    if (tag == "IN") return {"ADP", "_", false};
    if (tag == "PU") return {"PUNCT", "_", false};
    throw ConfigError("unknown preterminal tag '" + tag + "'");
}

// Slot kinds in template order; %1, %2, ... are content placeholders.
enum class SlotPos { Noun, Verb, Adj };

struct TemplateFamily {
    double weight;
    std::vector<SlotPos> slots;
    const char* variant_a;
    const char* variant_b;
};

// Both variants of a family yield the same token sequence; only the
// bracketing (and therefore each content word's closing-node count)
// differs.
inline const std::vector<TemplateFamily>& families() {
    static const std::vector<TemplateFamily> f = {
        {0.15,
         {SlotPos::Noun, SlotPos::Verb, SlotPos::Noun},
         "(S (NP (DT the) (NN %1)) (VP (VB %2) (NP (DT the) (NN %3))) (PU .))",
         "(S (NP (DT the) (NP (NN %1))) (VP (VB %2)) (NP (DT the) (NN %3)) (PU .))"},
        {0.30,
         {SlotPos::Noun, SlotPos::Noun, SlotPos::Verb, SlotPos::Noun},
         "(S (NP (DT the) (NN %1)) (IN of) (NP (DT the) (NN %2)) (VP (VB %3) (NP (DT the) (NN %4))) (PU .))",
         "(S (NP (DT the) (NP (NN %1))) (PP (IN of) (NP (DT the) (NN %2))) (VP (VB %3)) (NP (DT the) (NN %4)) (PU .))"},
        {0.10,
         {SlotPos::Adj, SlotPos::Noun, SlotPos::Verb, SlotPos::Adj, SlotPos::Noun},
         "(S (NP (DT the) (JJ %1) (NN %2)) (VP (VB %3) (NP (DT the) (JJ %4) (NN %5))) (PU .))",
         "(S (NP (DT the) (ADJP (JJ %1)) (NP (NN %2))) (VP (VB %3)) (NP (DT the) (ADJP (JJ %4)) (NN %5)) (PU .))"},
        {0.45,
         {SlotPos::Noun, SlotPos::Noun},
         "(S (NP (DT the) (NN %1)) (PP (IN near) (NP (DT the) (NN %2))) (PU .))",
         "(S (NP (DT the) (NP (NN %1))) (IN near) (NP (DT the) (NN %2)) (PU .))"},
    };
    return f;
}

struct CategoryDef {
    const char* name;
    const char* stem;
};

inline const std::array<CategoryDef, 4>& noun_categories() {
    static const std::array<CategoryDef, 4> c = {
        CategoryDef{"creature", "bar"}, {"vessel", "dov"}, {"mineral", "gal"}, {"plant", "fen"}};
    return c;
}
inline const std::array<CategoryDef, 4>& verb_categories() {
    static const std::array<CategoryDef, 4> c = {
        CategoryDef{"motion", "lop"}, {"impact", "tam"}, {"exchange", "ker"}, {"speech", "sul"}};
    return c;
}
inline const std::array<CategoryDef, 4>& adj_categories() {
    static const std::array<CategoryDef, 4> c = {
        CategoryDef{"size", "mire"}, {"shade", "nol"}, {"shape", "pru"}, {"worth", "vek"}};
    return c;
}

inline std::string lexeme_suffix(int i) {
    static const std::array<const char*, 20> syl = {"a",  "e",  "i",  "o",  "u",  "an", "en",
                                                    "in", "on", "un", "ar", "er", "ir", "or",
                                                    "ur", "al", "el", "il", "ol", "ul"};
    std::string s = syl[static_cast<std::size_t>(i % 20)];
    if (i >= 20) s += syl[static_cast<std::size_t>((i / 20) % 20)];
    return s;
}

}  // namespace detail

struct SynthCorpus {
    corpus::AnnotatedCorpus annotated;
    std::vector<std::string> trees;
    // token index -> semantic category (content tokens only)
    std::vector<std::pair<int, std::string>> semantic_labels;
    // token index -> pos|morph|ncn triplet (all tokens)
    std::vector<std::pair<int, std::string>> syntactic_labels;
    // synthetic loudness series per run on a 10 ms grid
    std::vector<std::vector<encoding::Event>> rms;
};

// Expected fraction of content tokens, straight from the template table.
inline double analytic_content_ratio(const GrammarConfig& = {}) {
    double content = 0.0, total = 0.0;
    for (const auto& fam : detail::families()) {
        // every content slot is preceded by a function word except the
        // verb; count tokens from the template itself
        const std::vector<int> counts = corpus::closing_nodes(fam.variant_a);
        content += fam.weight * static_cast<double>(fam.slots.size());
        total += fam.weight * static_cast<double>(counts.size());
    }
    return content / total;
}

// Deterministic synthetic corpus: n_tokens is a target, generation stops
// at the first sentence boundary at or past it. Tokens are split across
// runs as evenly as sentence boundaries allow.
inline SynthCorpus gen_corpus(const GrammarConfig& g, int n_tokens, int n_runs,
                              std::uint64_t seed) {
    if (g.grammar_size < 1) throw ConfigError("grammar_size must be >= 1");
    if (n_tokens < 10 * g.grammar_size)
        throw ConfigError("corpus length must be at least 10x grammar_size");
    if (n_runs < 1) throw ConfigError("n_runs must be >= 1");
    if (g.speech_rate_s <= 0.0) throw ConfigError("speech rate must be positive");

    Rng rng(seed);
    SynthCorpus out;
    const int per_run = (n_tokens + n_runs - 1) / n_runs;
    const auto& fams = detail::families();

    for (int run = 1; run <= n_runs; ++run) {
        double clock = 0.0;
        int run_tokens = 0;
        std::vector<encoding::Event> run_rms;
        while (run_tokens < per_run) {
            // family by weight, then a fair coin for the bracketing variant
            double u = rng.uniform();
            std::size_t fi = 0;
            for (; fi + 1 < fams.size(); ++fi) {
                if (u < fams[fi].weight) break;
                u -= fams[fi].weight;
            }
            const detail::TemplateFamily& fam = fams[fi];
            const bool variant_b = rng.uniform() < 0.5;
            std::string tree = variant_b ? fam.variant_b : fam.variant_a;

            // draw lexemes: category and lexeme index independent of the template
            std::vector<std::string> fillers, categories;
            for (const detail::SlotPos slot : fam.slots) {
                const auto& cats = slot == detail::SlotPos::Noun   ? detail::noun_categories()
                                   : slot == detail::SlotPos::Verb ? detail::verb_categories()
                                                                   : detail::adj_categories();
                const auto ci = static_cast<std::size_t>(rng.uniform_int(0, 3));
                const auto li = static_cast<int>(rng.uniform_int(0, g.grammar_size - 1));
                fillers.push_back(std::string(cats[ci].stem) + detail::lexeme_suffix(li));
                categories.push_back(cats[ci].name);
            }
            for (std::size_t s = fillers.size(); s-- > 0;) {
                const std::string ph = "%" + std::to_string(s + 1);
                const std::size_t at = tree.find(ph);
                if (at == std::string::npos) throw ConfigError("template placeholder missing");
                tree.replace(at, ph.size(), fillers[s]);
            }

            // walk the filled tree: leaves in order with their tags
            const std::vector<int> ncn = corpus::closing_nodes(tree);
            std::vector<std::pair<std::string, std::string>> leaves;  // (tag, surface)
            {
                std::size_t i = 0;
                bool expect_label = true;
                std::string label;
                while (i < tree.size()) {
                    const char c = tree[i];
                    if (c == '(') {
                        expect_label = true;
                        ++i;
                    } else if (c == ')' || c == ' ') {
                        ++i;
                    } else {
                        const std::size_t start = i;
                        while (i < tree.size() && tree[i] != '(' && tree[i] != ')' && tree[i] != ' ') ++i;
                        const std::string atom = tree.substr(start, i - start);
                        if (expect_label) {
                            label = atom;
                            expect_label = false;
                        } else {
                            leaves.emplace_back(label, atom);
                        }
                    }
                }
            }
            if (leaves.size() != ncn.size()) throw NumericError("template walk lost a leaf");

            std::size_t content_slot = 0;
            for (std::size_t t = 0; t < leaves.size(); ++t) {
                const detail::TagInfo info = detail::tag_info(leaves[t].first);
                corpus::AnnotatedToken tok;
                tok.surface = leaves[t].second;
                tok.pos = info.pos;
                tok.morph = info.morph;
                tok.ncn = ncn[t];
                tok.is_content = info.content;
                tok.onset_s = clock;
                tok.offset_s = clock + g.speech_rate_s;
                tok.run_id = run;
                clock = tok.offset_s;

                const int index = static_cast<int>(out.annotated.tokens.size());
                if (info.content) {
                    out.semantic_labels.emplace_back(index, categories[content_slot]);
                    ++content_slot;
                }
                out.annotated.tokens.push_back(tok);
                out.syntactic_labels.emplace_back(
                    index, corpus::syntactic_feature(out.annotated.tokens.back()));
                ++run_tokens;
            }
            out.trees.push_back(tree);
            clock += g.sentence_gap_s;
        }

        // loudness proxy: one sample per 10 ms, scaled by word length
        const double duration = clock;
        const int steps = static_cast<int>(std::floor(duration / 0.01));
        std::size_t cursor = out.annotated.tokens.size();
        while (cursor > 0 && out.annotated.tokens[cursor - 1].run_id == run) --cursor;
        for (int s = 0; s <= steps; ++s) {
            const double t = s * 0.01;
            double amp = 0.0;
            while (cursor < out.annotated.tokens.size() &&
                   out.annotated.tokens[cursor].run_id == run &&
                   out.annotated.tokens[cursor].offset_s <= t)
                ++cursor;
            if (cursor < out.annotated.tokens.size() &&
                out.annotated.tokens[cursor].run_id == run &&
                out.annotated.tokens[cursor].onset_s <= t)
                amp = 0.5 + 0.1 * static_cast<double>(out.annotated.tokens[cursor].surface.size() % 5);
            run_rms.push_back({t, amp});
        }
        out.rms.push_back(std::move(run_rms));
    }
    out.annotated.n_runs = n_runs;
    return out;
}

// ---------------------------------------------------------------------
// Synthetic BOLD with ground truth
// ---------------------------------------------------------------------

enum class VoxelClass { SyntaxDriven, SemanticsDriven, Mixed, Null };

inline const char* voxel_class_name(VoxelClass c) {
    switch (c) {
        case VoxelClass::SyntaxDriven: return "syntax";
        case VoxelClass::SemanticsDriven: return "semantics";
        case VoxelClass::Mixed: return "mixed";
        case VoxelClass::Null: return "null";
    }
    throw ConfigError("bad voxel class");
}

struct VoxelLayout {
    encoding::GridGeometry grid;
    std::vector<VoxelClass> classes;
    std::vector<double> w_syn, w_sem;
    double snr = 1.0;

    int n_voxels() const { return static_cast<int>(classes.size()); }

    void validate() const {
        if (static_cast<int>(classes.size()) != grid.n_voxels())
            throw DataError("voxel class list does not match grid");
        if (w_syn.size() != classes.size() || w_sem.size() != classes.size())
            throw DataError("mixing weight lists do not match voxel count");
        if (!(snr > 0.0)) throw ConfigError("snr must be positive");
        for (std::size_t v = 0; v < classes.size(); ++v)
            if (classes[v] == VoxelClass::Null && (w_syn[v] != 0.0 || w_sem[v] != 0.0))
                throw DataError("null voxel with nonzero mixing weight");
    }

    std::vector<int> voxels_of(VoxelClass c) const {
        std::vector<int> out;
        for (std::size_t v = 0; v < classes.size(); ++v)
            if (classes[v] == c) out.push_back(static_cast<int>(v));
        return out;
    }

    // Default desk-scale layout: 10x10x5 grid, classes interleaved in the
    // cycle syntax, semantics, mixed, null, null. Large voxels keep the
    // 6 mm smoothing kernel nearly voxel-local so classes do not bleed.
    static VoxelLayout standard(double snr = 1.0) {
        VoxelLayout lay;
        lay.grid = {10, 10, 5, 10.0, 10.0, 10.0};
        lay.snr = snr;
        const int n = lay.grid.n_voxels();
        lay.classes.resize(static_cast<std::size_t>(n));
        lay.w_syn.assign(static_cast<std::size_t>(n), 0.0);
        lay.w_sem.assign(static_cast<std::size_t>(n), 0.0);
        for (int v = 0; v < n; ++v) {
            VoxelClass c;
            switch (v % 5) {
                case 0: c = VoxelClass::SyntaxDriven; break;
                case 1: c = VoxelClass::SemanticsDriven; break;
                case 2: c = VoxelClass::Mixed; break;
                default: c = VoxelClass::Null; break;
            }
            lay.classes[static_cast<std::size_t>(v)] = c;
            if (c == VoxelClass::SyntaxDriven) lay.w_syn[static_cast<std::size_t>(v)] = 1.0;
            if (c == VoxelClass::SemanticsDriven) lay.w_sem[static_cast<std::size_t>(v)] = 1.0;
            if (c == VoxelClass::Mixed) {
                lay.w_syn[static_cast<std::size_t>(v)] = 0.7;
                lay.w_sem[static_cast<std::size_t>(v)] = 0.7;
            }
        }
        return lay;
    }

    io::json to_json() const {
        io::json j = grid.to_json();
        j["snr"] = snr;
        std::vector<std::string> names;
        names.reserve(classes.size());
        for (VoxelClass c : classes) names.emplace_back(voxel_class_name(c));
        j["classes"] = names;
        j["w_syn"] = w_syn;
        j["w_sem"] = w_sem;
        return j;
    }

    static VoxelLayout from_json(const io::json& j) {
        VoxelLayout lay;
        lay.grid = encoding::GridGeometry::from_json(j);
        lay.snr = j.at("snr").get<double>();
        for (const auto& name : j.at("classes")) {
            const std::string s = name.get<std::string>();
            if (s == "syntax") lay.classes.push_back(VoxelClass::SyntaxDriven);
            else if (s == "semantics") lay.classes.push_back(VoxelClass::SemanticsDriven);
            else if (s == "mixed") lay.classes.push_back(VoxelClass::Mixed);
            else if (s == "null") lay.classes.push_back(VoxelClass::Null);
            else throw DataError("unknown voxel class '" + s + "'");
        }
        lay.w_syn = j.at("w_syn").get<std::vector<double>>();
        lay.w_sem = j.at("w_sem").get<std::vector<double>>();
        lay.validate();
        return lay;
    }
};

struct GroundTruth {
    Eigen::MatrixXd beta_syn;  // d_syn x voxels
    Eigen::MatrixXd beta_sem;  // d_sem x voxels
    VoxelLayout layout;
};

// One pseudo-subject's runs. The signal (betas and designs) depends only
// on the base seed, so all subjects share it; the noise stream is forked
// per subject and run.
inline std::pair<std::vector<encoding::BoldRun>, GroundTruth> gen_bold(
    const Eigen::MatrixXd& x_syn, const Eigen::MatrixXd& x_sem,
    const corpus::AnnotatedCorpus& stimulus, const VoxelLayout& layout,
    const encoding::HrfKernel& kernel, double tr_s, int n_scans, std::uint64_t base_seed,
    int subject) {
    layout.validate();
    const auto n_tokens = static_cast<Eigen::Index>(stimulus.tokens.size());
    if (x_syn.rows() != n_tokens || x_sem.rows() != n_tokens)
        throw DataError("feature matrices must have one row per stimulus token");
    const int n_vox = layout.n_voxels();

    // ground-truth weights, shared across subjects
    Rng beta_rng(splitmix64(base_seed) ^ 0x9e37u);
    GroundTruth truth;
    truth.layout = layout;
    truth.beta_syn = Eigen::MatrixXd::Zero(x_syn.cols(), n_vox);
    truth.beta_sem = Eigen::MatrixXd::Zero(x_sem.cols(), n_vox);
    for (int v = 0; v < n_vox; ++v) {
        for (Eigen::Index d = 0; d < x_syn.cols(); ++d) {
            const double g = beta_rng.normal();
            if (layout.w_syn[static_cast<std::size_t>(v)] != 0.0) truth.beta_syn(d, v) = g;
        }
        for (Eigen::Index d = 0; d < x_sem.cols(); ++d) {
            const double g = beta_rng.normal();
            if (layout.w_sem[static_cast<std::size_t>(v)] != 0.0) truth.beta_sem(d, v) = g;
        }
    }

    // noise-free signal per run
    std::vector<Eigen::MatrixXd> signal(static_cast<std::size_t>(stimulus.n_runs));
    for (int run = 1; run <= stimulus.n_runs; ++run) {
        const std::vector<int> idx = stimulus.run_token_indices(run);
        if (idx.empty()) throw DataError("stimulus run " + std::to_string(run) + " has no tokens");
        Eigen::MatrixXd xs(static_cast<Eigen::Index>(idx.size()), x_syn.cols());
        Eigen::MatrixXd xm(static_cast<Eigen::Index>(idx.size()), x_sem.cols());
        std::vector<double> offsets;
        offsets.reserve(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            xs.row(static_cast<Eigen::Index>(i)) = x_syn.row(idx[i]);
            xm.row(static_cast<Eigen::Index>(i)) = x_sem.row(idx[i]);
            offsets.push_back(stimulus.tokens[static_cast<std::size_t>(idx[i])].offset_s);
        }
        const Eigen::MatrixXd d_syn = encoding::build_design(xs, offsets, kernel, tr_s, n_scans);
        const Eigen::MatrixXd d_sem = encoding::build_design(xm, offsets, kernel, tr_s, n_scans);
        Eigen::MatrixXd sig(n_scans, n_vox);
        for (int v = 0; v < n_vox; ++v)
            sig.col(v) = layout.w_syn[static_cast<std::size_t>(v)] *
                             (d_syn * truth.beta_syn.col(v)) +
                         layout.w_sem[static_cast<std::size_t>(v)] * (d_sem * truth.beta_sem.col(v));
        signal[static_cast<std::size_t>(run - 1)] = std::move(sig);
    }

    // standardize the signal over the concatenated runs so snr means
    // signal-sd over noise-sd
    const Eigen::Index total_scans = static_cast<Eigen::Index>(stimulus.n_runs) * n_scans;
    for (int v = 0; v < n_vox; ++v) {
        double mean = 0.0;
        for (const auto& s : signal) mean += s.col(v).sum();
        mean /= static_cast<double>(total_scans);
        double ss = 0.0;
        for (const auto& s : signal) ss += (s.col(v).array() - mean).square().sum();
        const double sd = std::sqrt(ss / static_cast<double>(total_scans));
        for (auto& s : signal) {
            if (sd > 1e-12)
                s.col(v) = (s.col(v).array() - mean) / sd;
            else
                s.col(v).setZero();
        }
    }

    std::vector<encoding::BoldRun> runs;
    const double noise_sd = std::isinf(layout.snr) ? 0.0 : 1.0 / layout.snr;
    for (int run = 1; run <= stimulus.n_runs; ++run) {
        Rng noise_rng(splitmix64(base_seed) ^
                      splitmix64(0x100000ULL + static_cast<std::uint64_t>(subject) * 1000 +
                                 static_cast<std::uint64_t>(run)));
        encoding::BoldRun b;
        b.tr_s = tr_s;
        b.grid = layout.grid;
        b.run_id = run;
        b.data = signal[static_cast<std::size_t>(run - 1)];
        if (noise_sd > 0.0) {
            for (Eigen::Index s = 0; s < b.data.rows(); ++s)
                for (Eigen::Index v = 0; v < b.data.cols(); ++v)
                    b.data(s, v) += noise_sd * noise_rng.normal();
        }
        runs.push_back(std::move(b));
    }
    return {std::move(runs), std::move(truth)};
}

// Detection and specificity rates per voxel class, plus the pass/fail
// verdicts used by the acceptance checks.
inline io::json evaluate_recovery(const std::vector<char>& syn_mask,
                                  const std::vector<char>& sem_mask,
                                  const stats::SpecificityMap& spec, const VoxelLayout& layout) {
    layout.validate();
    const auto n = static_cast<std::size_t>(layout.n_voxels());
    if (syn_mask.size() != n || sem_mask.size() != n ||
        static_cast<std::size_t>(spec.x.size()) != n)
        throw DataError("recovery inputs do not share the layout's voxel count");

    io::json per_class = io::json::object();
    for (const VoxelClass c : {VoxelClass::SyntaxDriven, VoxelClass::SemanticsDriven,
                               VoxelClass::Mixed, VoxelClass::Null}) {
        const std::vector<int> voxels = layout.voxels_of(c);
        std::size_t syn_hits = 0, sem_hits = 0, spec_count = 0;
        double spec_sum = 0.0;
        for (const int v : voxels) {
            syn_hits += syn_mask[static_cast<std::size_t>(v)] ? 1 : 0;
            sem_hits += sem_mask[static_cast<std::size_t>(v)] ? 1 : 0;
            if (spec.valid[static_cast<std::size_t>(v)]) {
                spec_sum += spec.x(v);
                ++spec_count;
            }
        }
        const double denom = voxels.empty() ? 1.0 : static_cast<double>(voxels.size());
        per_class[voxel_class_name(c)] = {
            {"n_voxels", voxels.size()},
            {"syntax_detection_rate", static_cast<double>(syn_hits) / denom},
            {"semantics_detection_rate", static_cast<double>(sem_hits) / denom},
            {"mean_specificity", spec_count ? spec_sum / static_cast<double>(spec_count) : 0.0},
            {"n_specificity_valid", spec_count}};
    }

    io::json verdicts;
    const double syn_detect = per_class["syntax"]["syntax_detection_rate"].get<double>();
    const double sem_detect = per_class["semantics"]["semantics_detection_rate"].get<double>();
    const double null_syn = per_class["null"]["syntax_detection_rate"].get<double>();
    const double null_sem = per_class["null"]["semantics_detection_rate"].get<double>();
    const double spec_sem = per_class["semantics"]["mean_specificity"].get<double>();
    const double spec_syn = per_class["syntax"]["mean_specificity"].get<double>();
    verdicts["syntax_detection_ok"] = syn_detect >= 0.90;
    verdicts["semantics_detection_ok"] = sem_detect >= 0.90;
    verdicts["null_false_rate_ok"] = null_syn <= 0.01 && null_sem <= 0.01;
    verdicts["specificity_signs_ok"] = spec_sem > 0.0 && spec_syn < 0.0;

    return io::json{{"per_class", per_class}, {"verdicts", verdicts}};
}

}  // namespace irnlm::synth
