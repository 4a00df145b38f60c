#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/corpus.hpp"
#include "irnlm/decode.hpp"
#include "irnlm/embed.hpp"
#include "irnlm/encoding.hpp"
#include "irnlm/glove.hpp"
#include "irnlm/io.hpp"
#include "irnlm/minigpt.hpp"
#include "irnlm/stats.hpp"
#include "irnlm/synth.hpp"

namespace irnlm::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------
// Configuration. One JSON file with per-stage sections; every field has
// a default, so {} is a valid config. Unknown keys and type mismatches
// are reported by field name.
// ---------------------------------------------------------------------

namespace detail {

inline void check_keys(const io::json& j, const std::string& section,
                       const std::vector<std::string>& allowed) {
    if (!j.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            const std::string name = section.empty() ? key : section + "." + key;
            throw ConfigError("config field '" + name + "' is not recognized");
        }
    }
}

template <typename T>
T field_or(const io::json& j, const std::string& section, const char* key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const io::json::exception& e) {
        const std::string name = section.empty() ? key : section + "." + std::string(key);
        throw ConfigError("config field '" + name + "': " + e.what());
    }
}

}  // namespace detail

struct EmbedParams {
    std::string protocol = "sliding";  // static | sliding | context_limited
    int window = 64;                   // sliding window N
    int k = 5;                         // context cap for context_limited
    int layer = 0;                     // 0 means the model's default layer
};

struct EncodeParams {
    double hrf_dt_s = 0.1;
    double hrf_duration_s = 32.0;
    std::vector<double> lambda_grid = encoding::default_lambda_grid();
    bool standardize = true;
};

struct StatsParams {
    double fwhm_mm = 6.0;
    double q = 0.005;
    double percentile = 90.0;
    bool average_log_ratios = true;
};

struct DecodeParams {
    double l2 = 1.0;
    int max_iter = 500;
    std::string dummy = "most_frequent";  // most_frequent | prior_sampling
};

struct SynthParams {
    int grammar_size = 5;
    int length = 4800;
    int n_runs = 4;
    double speech_rate_s = 0.3;
    double sentence_gap_s = 0.2;
    int n_subjects = 20;
    int n_scans = 200;
    double tr_s = 2.0;
    double snr = 1.0;
};

struct PipelineConfig {
    io::json raw = io::json::object();
    std::uint64_t seed = 1;
    int threads = 1;
    int glove_window = 15;
    glove::GloveConfig glove;
    minigpt::ModelConfig gpt;  // vocab_size is filled in at training time
    minigpt::OptimizerSettings gpt_opt;
    int gpt_context_k = 0;  // > 0 trains on fixed-context rows instead of chunks
    EmbedParams embed;
    EncodeParams encode;
    StatsParams stats;
    DecodeParams decode;
    SynthParams synth;

    static PipelineConfig from_json(const io::json& j) {
        using detail::check_keys;
        using detail::field_or;
        PipelineConfig c;
        c.raw = j;
        check_keys(j, "",
                   {"seed", "threads", "glove", "gpt", "embed", "encode", "stats", "decode",
                    "synth"});
        c.seed = field_or<std::uint64_t>(j, "", "seed", 1);
        c.threads = field_or<int>(j, "", "threads", 0);
        if (c.threads == 0) {
            if (const char* env = std::getenv("IRNLM_THREADS")) {
                try {
                    c.threads = std::stoi(env);
                } catch (const std::exception&) {
                    throw ConfigError("IRNLM_THREADS must be an integer, got '" +
                                      std::string(env) + "'");
                }
            } else {
                c.threads = 1;
            }
        }
        if (c.threads < 1) throw ConfigError("config field 'threads' must be >= 1");

        if (j.contains("glove")) {
            const io::json& g = j.at("glove");
            check_keys(g, "glove", {"dim", "window", "epochs", "lr", "x_max", "alpha"});
            c.glove.dim = field_or<int>(g, "glove", "dim", c.glove.dim);
            c.glove_window = field_or<int>(g, "glove", "window", c.glove_window);
            c.glove.epochs = field_or<int>(g, "glove", "epochs", c.glove.epochs);
            c.glove.lr = field_or<double>(g, "glove", "lr", c.glove.lr);
            c.glove.x_max = field_or<double>(g, "glove", "x_max", c.glove.x_max);
            c.glove.alpha = field_or<double>(g, "glove", "alpha", c.glove.alpha);
        }
        if (j.contains("gpt")) {
            const io::json& g = j.at("gpt");
            check_keys(g, "gpt",
                       {"n_layers", "n_heads", "d_head", "max_seq", "positional", "bias_source",
                        "epochs", "batch_size", "lr", "beta1", "beta2", "eps", "clip_norm",
                        "context_k"});
            c.gpt.n_layers = field_or<int>(g, "gpt", "n_layers", c.gpt.n_layers);
            c.gpt.n_heads = field_or<int>(g, "gpt", "n_heads", c.gpt.n_heads);
            c.gpt.d_head = field_or<int>(g, "gpt", "d_head", c.gpt.d_head);
            c.gpt.max_seq = field_or<int>(g, "gpt", "max_seq", c.gpt.max_seq);
            c.gpt.positional = minigpt::positional_from_name(
                field_or<std::string>(g, "gpt", "positional", "relative_bias"));
            const std::string bias = field_or<std::string>(g, "gpt", "bias_source", "query");
            if (bias == "query") c.gpt.bias_source = minigpt::BiasSource::Query;
            else if (bias == "key") c.gpt.bias_source = minigpt::BiasSource::Key;
            else throw ConfigError("config field 'gpt.bias_source' must be query or key");
            c.gpt_opt.epochs = field_or<int>(g, "gpt", "epochs", c.gpt_opt.epochs);
            c.gpt_opt.batch_size = field_or<int>(g, "gpt", "batch_size", c.gpt_opt.batch_size);
            c.gpt_opt.lr = field_or<double>(g, "gpt", "lr", c.gpt_opt.lr);
            c.gpt_opt.beta1 = field_or<double>(g, "gpt", "beta1", c.gpt_opt.beta1);
            c.gpt_opt.beta2 = field_or<double>(g, "gpt", "beta2", c.gpt_opt.beta2);
            c.gpt_opt.eps = field_or<double>(g, "gpt", "eps", c.gpt_opt.eps);
            c.gpt_opt.clip_norm = field_or<double>(g, "gpt", "clip_norm", c.gpt_opt.clip_norm);
            c.gpt_context_k = field_or<int>(g, "gpt", "context_k", 0);
            if (c.gpt_context_k < 0) throw ConfigError("config field 'gpt.context_k' must be >= 0");
        }
        if (j.contains("embed")) {
            const io::json& g = j.at("embed");
            check_keys(g, "embed", {"protocol", "window", "k", "layer"});
            c.embed.protocol = field_or<std::string>(g, "embed", "protocol", c.embed.protocol);
            if (c.embed.protocol != "static" && c.embed.protocol != "sliding" &&
                c.embed.protocol != "context_limited")
                throw ConfigError(
                    "config field 'embed.protocol' must be static, sliding or context_limited");
            c.embed.window = field_or<int>(g, "embed", "window", c.embed.window);
            c.embed.k = field_or<int>(g, "embed", "k", c.embed.k);
            c.embed.layer = field_or<int>(g, "embed", "layer", c.embed.layer);
        }
        if (j.contains("encode")) {
            const io::json& g = j.at("encode");
            check_keys(g, "encode", {"hrf_dt_s", "hrf_duration_s", "lambda_grid", "standardize"});
            c.encode.hrf_dt_s = field_or<double>(g, "encode", "hrf_dt_s", c.encode.hrf_dt_s);
            c.encode.hrf_duration_s =
                field_or<double>(g, "encode", "hrf_duration_s", c.encode.hrf_duration_s);
            c.encode.lambda_grid = field_or<std::vector<double>>(g, "encode", "lambda_grid",
                                                                 c.encode.lambda_grid);
            if (c.encode.lambda_grid.empty())
                throw ConfigError("config field 'encode.lambda_grid' must not be empty");
            c.encode.standardize = field_or<bool>(g, "encode", "standardize", c.encode.standardize);
        }
        if (j.contains("stats")) {
            const io::json& g = j.at("stats");
            check_keys(g, "stats", {"fwhm_mm", "q", "percentile", "average_log_ratios"});
            c.stats.fwhm_mm = field_or<double>(g, "stats", "fwhm_mm", c.stats.fwhm_mm);
            c.stats.q = field_or<double>(g, "stats", "q", c.stats.q);
            c.stats.percentile = field_or<double>(g, "stats", "percentile", c.stats.percentile);
            c.stats.average_log_ratios =
                field_or<bool>(g, "stats", "average_log_ratios", c.stats.average_log_ratios);
        }
        if (j.contains("decode")) {
            const io::json& g = j.at("decode");
            check_keys(g, "decode", {"l2", "max_iter", "dummy"});
            c.decode.l2 = field_or<double>(g, "decode", "l2", c.decode.l2);
            c.decode.max_iter = field_or<int>(g, "decode", "max_iter", c.decode.max_iter);
            c.decode.dummy = field_or<std::string>(g, "decode", "dummy", c.decode.dummy);
            if (c.decode.dummy != "most_frequent" && c.decode.dummy != "prior_sampling")
                throw ConfigError(
                    "config field 'decode.dummy' must be most_frequent or prior_sampling");
        }
        if (j.contains("synth")) {
            const io::json& g = j.at("synth");
            check_keys(g, "synth",
                       {"grammar_size", "length", "n_runs", "speech_rate_s", "sentence_gap_s",
                        "n_subjects", "n_scans", "tr_s", "snr"});
            c.synth.grammar_size = field_or<int>(g, "synth", "grammar_size", c.synth.grammar_size);
            c.synth.length = field_or<int>(g, "synth", "length", c.synth.length);
            c.synth.n_runs = field_or<int>(g, "synth", "n_runs", c.synth.n_runs);
            c.synth.speech_rate_s =
                field_or<double>(g, "synth", "speech_rate_s", c.synth.speech_rate_s);
            c.synth.sentence_gap_s =
                field_or<double>(g, "synth", "sentence_gap_s", c.synth.sentence_gap_s);
            c.synth.n_subjects = field_or<int>(g, "synth", "n_subjects", c.synth.n_subjects);
            c.synth.n_scans = field_or<int>(g, "synth", "n_scans", c.synth.n_scans);
            c.synth.tr_s = field_or<double>(g, "synth", "tr_s", c.synth.tr_s);
            c.synth.snr = field_or<double>(g, "synth", "snr", c.synth.snr);
        }
        c.glove.seed = stage_seed(c.seed, "glove");
        c.gpt.seed = stage_seed(c.seed, "gpt-init");
        c.gpt_opt.seed = stage_seed(c.seed, "gpt-train");
        return c;
    }

    static PipelineConfig load(const fs::path& path) {
        if (!fs::exists(path))
            throw ConfigError("missing input: config file '" + path.string() + "' does not exist");
        return from_json(io::read_json(path));
    }

    // Hash over the canonical (key-sorted) dump, so key order in the file
    // does not matter.
    std::string config_hash() const {
        const nlohmann::json sorted = nlohmann::json::parse(raw.dump());
        return to_hex(fnv1a(sorted.dump()));
    }

    static std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
        return splitmix64(seed ^ fnv1a(stage));
    }
};

// ---------------------------------------------------------------------
// Provenance sidecars and idempotent stage skipping
// ---------------------------------------------------------------------

inline void require_file(const fs::path& path, const std::string& what) {
    if (!fs::exists(path))
        throw ConfigError("missing input: " + what + " '" + path.string() + "' does not exist");
}

inline fs::path prov_path(const fs::path& artifact) {
    return fs::path(artifact.string() + ".prov.json");
}

inline void write_provenance(const fs::path& artifact, const std::string& stage,
                             const PipelineConfig& cfg, const std::vector<std::string>& inputs) {
    io::json j;
    j["stage"] = stage;
    j["config_hash"] = cfg.config_hash();
    j["seed"] = cfg.seed;
    j["inputs"] = inputs;
    io::write_json(prov_path(artifact), j);
}

inline bool artifact_current(const fs::path& artifact, const std::string& stage,
                             const PipelineConfig& cfg) {
    if (!fs::exists(artifact) || !fs::exists(prov_path(artifact))) return false;
    try {
        const io::json j = io::read_json(prov_path(artifact));
        return j.at("stage").get<std::string>() == stage &&
               j.at("config_hash").get<std::string>() == cfg.config_hash();
    } catch (const std::exception&) {
        return false;
    }
}

inline bool outputs_current(const std::vector<fs::path>& outputs, const std::string& stage,
                            const PipelineConfig& cfg, bool force) {
    if (force) return false;
    for (const auto& p : outputs)
        if (!artifact_current(p, stage, cfg)) return false;
    return true;
}

// ---------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------

inline void save_labels(const fs::path& path,
                        const std::vector<std::pair<int, std::string>>& labels) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    for (const auto& [index, label] : labels) os << index << '\t' << label << '\n';
    if (!os) throw DataError("write failed: " + path.string());
}

inline std::vector<std::pair<int, std::string>> load_labels(const fs::path& path) {
    std::vector<std::pair<int, std::string>> out;
    for (const io::TsvRow& row : io::read_tsv(path)) {
        if (row.fields.size() != 2)
            throw DataError(path.string() + ":" + std::to_string(row.line_no) +
                            ": expected token_index<TAB>label");
        try {
            out.emplace_back(std::stoi(row.fields[0]), row.fields[1]);
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(row.line_no) +
                            ": bad token index '" + row.fields[0] + "'");
        }
    }
    if (out.empty()) throw DataError(path.string() + ": no labels");
    return out;
}

inline std::vector<encoding::BoldRun> load_bold_dir(const fs::path& dir) {
    require_file(dir, "bold directory");
    std::vector<encoding::BoldRun> runs;
    for (int r = 1;; ++r) {
        const fs::path p = dir / ("run_" + std::to_string(r) + ".bold");
        if (!fs::exists(p)) break;
        runs.push_back(encoding::BoldRun::load(p));
    }
    if (runs.empty())
        throw DataError("no bold runs found under '" + dir.string() + "' (expected run_1.bold...)");
    return runs;
}

inline std::vector<char> mask_from_map(const encoding::RMap& m) {
    std::vector<char> mask(static_cast<std::size_t>(m.values.size()));
    for (Eigen::Index v = 0; v < m.values.size(); ++v)
        mask[static_cast<std::size_t>(v)] = m.values(v) > 0.5 ? 1 : 0;
    return mask;
}

inline encoding::RMap map_from_mask(const std::vector<char>& mask,
                                    const encoding::GridGeometry& grid, io::json meta) {
    encoding::RMap m;
    m.grid = grid;
    m.meta = std::move(meta);
    m.values.resize(static_cast<Eigen::Index>(mask.size()));
    for (std::size_t v = 0; v < mask.size(); ++v)
        m.values(static_cast<Eigen::Index>(v)) = mask[v] ? 1.0 : 0.0;
    return m;
}

inline void write_loss_csv(const fs::path& path,
                           const std::vector<std::pair<long, double>>& rows) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "step,loss\n";
    os.precision(17);
    for (const auto& [step, loss] : rows) os << step << ',' << loss << '\n';
    if (!os) throw DataError("write failed: " + path.string());
}

// Join embedding rows with per-token labels into a decoding problem.
// Only tokens that have both a row and a label participate.
inline decode::LabeledData make_labeled(const embed::EmbeddingMatrix& em,
                                        const std::vector<std::pair<int, std::string>>& labels,
                                        const corpus::AnnotatedCorpus& c) {
    std::map<int, std::string> by_token(labels.begin(), labels.end());
    std::set<std::string> names;
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < em.x.rows(); ++i) {
        const int tok = em.alignment[static_cast<std::size_t>(i)];
        if (tok >= static_cast<int>(c.tokens.size()))
            throw DataError("embedding alignment points past the corpus");
        auto it = by_token.find(tok);
        if (it == by_token.end()) continue;
        rows.push_back(i);
        names.insert(it->second);
    }
    if (rows.empty()) throw DataError("no embedding rows with labels");
    decode::LabeledData data;
    data.class_names.assign(names.begin(), names.end());
    std::map<std::string, int> name_id;
    for (std::size_t i = 0; i < data.class_names.size(); ++i)
        name_id[data.class_names[i]] = static_cast<int>(i);
    data.x.resize(static_cast<Eigen::Index>(rows.size()), em.x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        data.x.row(static_cast<Eigen::Index>(i)) = em.x.row(rows[i]);
        const int tok = em.alignment[static_cast<std::size_t>(rows[i])];
        data.labels.push_back(name_id.at(by_token.at(tok)));
        data.run_ids.push_back(c.tokens[static_cast<std::size_t>(tok)].run_id);
    }
    return data;
}

// Per-run design rows for the tokens of one run, on the full token grid.
inline std::vector<Eigen::MatrixXd> designs_per_run(const embed::EmbeddingMatrix& em,
                                                    const corpus::AnnotatedCorpus& c,
                                                    const encoding::HrfKernel& kernel,
                                                    const std::vector<encoding::BoldRun>& runs,
                                                    bool standardize) {
    if (em.n_source_tokens != static_cast<int>(c.tokens.size()))
        throw DataError("embedding source token count does not match the corpus");
    const embed::EmbeddingMatrix full =
        embed::scatter_to_tokens(em, static_cast<int>(c.tokens.size()));
    std::vector<Eigen::MatrixXd> designs;
    for (const encoding::BoldRun& run : runs) {
        const std::vector<int> idx = c.run_token_indices(run.run_id);
        if (idx.empty())
            throw DataError("corpus has no tokens for run " + std::to_string(run.run_id));
        Eigen::MatrixXd feats(static_cast<Eigen::Index>(idx.size()), full.x.cols());
        std::vector<double> offsets;
        offsets.reserve(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            feats.row(static_cast<Eigen::Index>(i)) = full.x.row(idx[i]);
            offsets.push_back(c.tokens[static_cast<std::size_t>(idx[i])].offset_s);
        }
        designs.push_back(encoding::build_design(feats, offsets, kernel, run.tr_s,
                                                 static_cast<int>(run.data.rows()), standardize));
    }
    return designs;
}

inline std::vector<Eigen::MatrixXd> baseline_per_run(const corpus::AnnotatedCorpus& c,
                                                     const fs::path& rms_dir,
                                                     const encoding::HrfKernel& kernel,
                                                     const std::vector<encoding::BoldRun>& runs,
                                                     bool standardize) {
    std::map<std::string, std::int64_t> counts;
    for (const auto& t : c.tokens) ++counts[t.surface];
    std::vector<Eigen::MatrixXd> designs;
    for (const encoding::BoldRun& run : runs) {
        const fs::path rms_path = rms_dir / ("run_" + std::to_string(run.run_id) + ".csv");
        require_file(rms_path, "acoustic rms series");
        const std::vector<encoding::Event> rms = encoding::read_events_csv(rms_path);
        const std::vector<int> idx = c.run_token_indices(run.run_id);
        std::vector<double> offsets;
        std::vector<std::string> words;
        for (const int i : idx) {
            offsets.push_back(c.tokens[static_cast<std::size_t>(i)].offset_s);
            words.push_back(c.tokens[static_cast<std::size_t>(i)].surface);
        }
        designs.push_back(encoding::baseline_regressors(
            rms, offsets, encoding::log_frequencies(words, counts), kernel, run.tr_s,
            static_cast<int>(run.data.rows()), standardize));
    }
    return designs;
}

// ---------------------------------------------------------------------
// Stages. Each one checks its outputs' provenance first so re-running
// with the same config is a no-op, then writes outputs plus sidecars.
// Returns true when the stage was skipped.
// ---------------------------------------------------------------------

inline bool run_restrict(const PipelineConfig& cfg, const fs::path& corpus_path,
                         const std::string& mode, const fs::path& out, bool force = false) {
    const std::string stage = "corpus-restrict-" + mode;
    if (outputs_current({out}, stage, cfg, force)) return true;
    require_file(corpus_path, "annotated corpus");
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    corpus::save_stream(corpus::restrict_stream(c, corpus::mode_from_name(mode)), out);
    write_provenance(out, stage, cfg, {corpus_path.string()});
    return false;
}

inline bool run_vocab(const PipelineConfig& cfg, const std::vector<fs::path>& stream_paths,
                      const fs::path& out, bool force = false) {
    const std::string stage = "corpus-vocab";
    if (outputs_current({out}, stage, cfg, force)) return true;
    std::vector<corpus::FeatureStream> streams;
    std::vector<std::string> inputs;
    for (const auto& p : stream_paths) {
        require_file(p, "feature stream");
        streams.push_back(corpus::load_stream(p));
        inputs.push_back(p.string());
    }
    corpus::build_vocabulary(streams).save(out);
    write_provenance(out, stage, cfg, inputs);
    return false;
}

inline bool run_train_glove(const PipelineConfig& cfg, const fs::path& stream_path,
                            const fs::path& vocab_path, const fs::path& out_table,
                            const fs::path& out_csv, bool force = false) {
    const std::string stage = "train-glove";
    if (outputs_current({out_table, out_csv}, stage, cfg, force)) return true;
    require_file(stream_path, "feature stream");
    require_file(vocab_path, "vocabulary");
    const corpus::FeatureStream stream = corpus::load_stream(stream_path);
    const corpus::Vocabulary vocab = corpus::Vocabulary::load(vocab_path);
    const std::vector<int> ids = corpus::encode_ids(stream, vocab);
    const glove::CoocMatrix cooc =
        glove::build_cooccurrence({ids}, cfg.glove_window, vocab.size());
    const glove::GloveTrainResult result = glove::train_glove(cooc, cfg.glove);
    glove::embedding_table(result.model).save(out_table);
    std::vector<std::pair<long, double>> rows;
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
        rows.emplace_back(static_cast<long>(e), result.epoch_loss[e]);
    write_loss_csv(out_csv, rows);
    const std::vector<std::string> inputs = {stream_path.string(), vocab_path.string()};
    write_provenance(out_table, stage, cfg, inputs);
    write_provenance(out_csv, stage, cfg, inputs);
    return false;
}

inline bool run_train_gpt(const PipelineConfig& cfg, const fs::path& stream_path,
                          const fs::path& vocab_path, const fs::path& out_ckpt,
                          const fs::path& out_csv, bool force = false) {
    const std::string stage = "train-gpt";
    if (outputs_current({out_ckpt, out_csv}, stage, cfg, force)) return true;
    require_file(stream_path, "feature stream");
    require_file(vocab_path, "vocabulary");
    const corpus::FeatureStream stream = corpus::load_stream(stream_path);
    const corpus::Vocabulary vocab = corpus::Vocabulary::load(vocab_path);
    const std::vector<int> ids = corpus::encode_ids(stream, vocab);

    minigpt::ModelConfig mc = cfg.gpt;
    mc.vocab_size = vocab.size();
    mc.validate();
    minigpt::Parameters params = minigpt::init_parameters(mc);
    minigpt::TrainLog log;
    if (cfg.gpt_context_k > 0) {
        log = minigpt::train(params, minigpt::make_context_batches(ids, cfg.gpt_context_k),
                             cfg.gpt_opt);
    } else {
        log = minigpt::train_stream(params, ids, cfg.gpt_opt);
    }
    io::json meta;
    meta["mode"] = corpus::mode_name(vocab.mode());
    meta["trained_k"] = cfg.gpt_context_k;
    minigpt::save_checkpoint(out_ckpt, params, meta);
    write_loss_csv(out_csv, log.step_loss);
    const std::vector<std::string> inputs = {stream_path.string(), vocab_path.string()};
    write_provenance(out_ckpt, stage, cfg, inputs);
    write_provenance(out_csv, stage, cfg, inputs);
    return false;
}

inline bool run_embed(const PipelineConfig& cfg, const fs::path& stream_path,
                      const fs::path& vocab_path, const fs::path& model_path, const fs::path& out,
                      bool force = false) {
    const std::string stage = "embed-" + cfg.embed.protocol;
    if (outputs_current({out}, stage, cfg, force)) return true;
    require_file(stream_path, "feature stream");
    require_file(vocab_path, "vocabulary");
    require_file(model_path, "model");
    const corpus::FeatureStream stream = corpus::load_stream(stream_path);
    const corpus::Vocabulary vocab = corpus::Vocabulary::load(vocab_path);

    embed::EmbeddingMatrix em;
    if (cfg.embed.protocol == "static") {
        em = embed::extract_static(stream, vocab, glove::EmbeddingTable::load(model_path));
    } else {
        io::json meta;
        const minigpt::Parameters params = minigpt::load_checkpoint(model_path, &meta);
        const int layer =
            cfg.embed.layer > 0 ? cfg.embed.layer : minigpt::default_layer(params.cfg.n_layers);
        const std::vector<int> ids = corpus::encode_ids(stream, vocab);
        if (cfg.embed.protocol == "sliding") {
            em = embed::extract_sliding(ids, params, cfg.embed.window, layer, stream.alignment);
        } else {
            std::optional<int> trained_k;
            if (meta.contains("trained_k") && meta["trained_k"].get<int>() > 0)
                trained_k = meta["trained_k"].get<int>();
            em = embed::extract_context_limited(ids, params, cfg.embed.k, layer, trained_k,
                                                stream.alignment);
        }
        em.meta["model"] = model_path.filename().string();
    }
    em.n_source_tokens = stream.n_source_tokens;
    em.save(out);
    write_provenance(out, stage, cfg,
                     {stream_path.string(), vocab_path.string(), model_path.string()});
    return false;
}

inline bool run_encode_fit(const PipelineConfig& cfg, const fs::path& emb_path,
                           const fs::path& corpus_path, const fs::path& bold_dir,
                           const fs::path& out_map, bool with_baseline = false,
                           const fs::path& rms_dir = {}, bool force = false) {
    const std::string stage = with_baseline ? "encode-fit-baseline" : "encode-fit";
    if (outputs_current({out_map}, stage, cfg, force)) return true;
    require_file(emb_path, "embedding matrix");
    require_file(corpus_path, "annotated corpus");
    const embed::EmbeddingMatrix em = embed::EmbeddingMatrix::load(emb_path);
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    std::vector<encoding::BoldRun> runs = load_bold_dir(bold_dir);
    const encoding::HrfKernel kernel =
        encoding::hrf_kernel(cfg.encode.hrf_dt_s, cfg.encode.hrf_duration_s);

    std::vector<Eigen::MatrixXd> designs =
        designs_per_run(em, c, kernel, runs, cfg.encode.standardize);
    if (with_baseline) {
        const std::vector<Eigen::MatrixXd> nuisance =
            baseline_per_run(c, rms_dir, kernel, runs, cfg.encode.standardize);
        for (std::size_t r = 0; r < designs.size(); ++r) {
            Eigen::MatrixXd joint(designs[r].rows(), designs[r].cols() + nuisance[r].cols());
            joint << designs[r], nuisance[r];
            designs[r] = std::move(joint);
        }
    }

    std::vector<Eigen::MatrixXd> bold;
    for (const auto& run : runs) bold.push_back(encoding::preprocess_bold(run).run.data);
    const encoding::NestedCvResult result =
        encoding::nested_cv_encode(designs, bold, cfg.encode.lambda_grid, runs[0].grid);
    encoding::RMap map = result.mean_r;
    map.meta["embedding"] = emb_path.filename().string();
    map.meta["with_baseline"] = with_baseline;
    map.save(out_map);
    write_provenance(out_map, stage, cfg,
                     {emb_path.string(), corpus_path.string(), bold_dir.string()});
    return false;
}

inline bool run_encode_baseline(const PipelineConfig& cfg, const fs::path& corpus_path,
                                const fs::path& rms_dir, const fs::path& bold_dir,
                                const fs::path& out_map, bool force = false) {
    const std::string stage = "encode-baseline";
    if (outputs_current({out_map}, stage, cfg, force)) return true;
    require_file(corpus_path, "annotated corpus");
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    std::vector<encoding::BoldRun> runs = load_bold_dir(bold_dir);
    const encoding::HrfKernel kernel =
        encoding::hrf_kernel(cfg.encode.hrf_dt_s, cfg.encode.hrf_duration_s);
    const std::vector<Eigen::MatrixXd> designs =
        baseline_per_run(c, rms_dir, kernel, runs, cfg.encode.standardize);
    std::vector<Eigen::MatrixXd> bold;
    for (const auto& run : runs) bold.push_back(encoding::preprocess_bold(run).run.data);
    const encoding::NestedCvResult result =
        encoding::nested_cv_encode(designs, bold, cfg.encode.lambda_grid, runs[0].grid);
    encoding::RMap map = result.mean_r;
    map.meta["kind"] = "baseline_r";
    map.save(out_map);
    write_provenance(out_map, stage, cfg, {corpus_path.string(), bold_dir.string()});
    return false;
}

inline bool run_delta(const PipelineConfig& cfg, const fs::path& full_path,
                      const fs::path& reduced_path, const fs::path& out, bool force = false) {
    const std::string stage = "encode-delta";
    if (outputs_current({out}, stage, cfg, force)) return true;
    require_file(full_path, "r map");
    require_file(reduced_path, "r map");
    const encoding::RMap full = encoding::RMap::load(full_path);
    const encoding::RMap reduced = encoding::RMap::load(reduced_path);
    encoding::delta_r(full, reduced).save(out);
    write_provenance(out, stage, cfg, {full_path.string(), reduced_path.string()});
    return false;
}

inline bool run_group(const PipelineConfig& cfg, const std::vector<fs::path>& map_paths,
                      const fs::path& out_prefix, bool force = false) {
    const std::string stage = "stats-group";
    const fs::path z_path = out_prefix.string() + "_z.map";
    const fs::path mask_path = out_prefix.string() + "_mask.map";
    const fs::path summary_path = out_prefix.string() + "_summary.json";
    if (outputs_current({z_path, mask_path, summary_path}, stage, cfg, force)) return true;
    std::vector<encoding::RMap> subjects;
    std::vector<std::string> inputs;
    for (const auto& p : map_paths) {
        require_file(p, "subject map");
        subjects.push_back(encoding::RMap::load(p));
        inputs.push_back(p.string());
    }
    const stats::GroupTestResult result =
        stats::group_test_fdr(subjects, cfg.stats.q, cfg.stats.fwhm_mm);
    encoding::RMap z;
    z.values = result.z.values;
    z.grid = result.z.grid;
    z.meta = result.z.meta;
    z.save(z_path);
    map_from_mask(result.mask, result.z.grid, {{"kind", "mask"}, {"q", cfg.stats.q}})
        .save(mask_path);
    io::json summary;
    summary["n_subjects"] = subjects.size();
    summary["q"] = cfg.stats.q;
    summary["fwhm_mm"] = cfg.stats.fwhm_mm;
    summary["n_significant"] = result.n_significant;
    summary["z_fdr"] = result.z_fdr;
    io::write_json(summary_path, summary);
    for (const auto& p : {z_path, mask_path, summary_path}) write_provenance(p, stage, cfg, inputs);
    return false;
}

inline bool run_specificity(const PipelineConfig& cfg, const std::vector<fs::path>& sem_paths,
                            const std::vector<fs::path>& syn_paths, const fs::path& out_map,
                            const fs::path& out_valid, bool force = false) {
    const std::string stage = "stats-specificity";
    if (outputs_current({out_map, out_valid}, stage, cfg, force)) return true;
    std::vector<encoding::RMap> sem, syn;
    std::vector<std::string> inputs;
    for (const auto& p : sem_paths) {
        require_file(p, "semantic r map");
        sem.push_back(encoding::RMap::load(p));
        inputs.push_back(p.string());
    }
    for (const auto& p : syn_paths) {
        require_file(p, "syntactic r map");
        syn.push_back(encoding::RMap::load(p));
        inputs.push_back(p.string());
    }
    const stats::SpecificityMap spec =
        stats::group_specificity(sem, syn, cfg.stats.average_log_ratios);
    encoding::RMap m;
    m.grid = spec.grid;
    m.meta = {{"kind", "specificity"}};
    m.values = spec.x;
    for (Eigen::Index v = 0; v < m.values.size(); ++v)
        if (!spec.valid[static_cast<std::size_t>(v)]) m.values(v) = 0.0;
    m.save(out_map);
    map_from_mask(spec.valid, spec.grid, {{"kind", "mask"}}).save(out_valid);
    write_provenance(out_map, stage, cfg, inputs);
    write_provenance(out_valid, stage, cfg, inputs);
    return false;
}

inline io::json run_jaccard(const fs::path& mask_a, const fs::path& mask_b,
                            const fs::path& region = {}) {
    require_file(mask_a, "mask");
    require_file(mask_b, "mask");
    const encoding::RMap a = encoding::RMap::load(mask_a);
    const encoding::RMap b = encoding::RMap::load(mask_b);
    io::json out;
    out["mask_a"] = mask_a.string();
    out["mask_b"] = mask_b.string();
    if (region.empty()) {
        out["jaccard"] = stats::jaccard(mask_from_map(a), mask_from_map(b));
    } else {
        require_file(region, "region mask");
        const encoding::RMap r = encoding::RMap::load(region);
        out["region"] = region.string();
        out["jaccard"] = stats::jaccard_within(mask_from_map(a), mask_from_map(b),
                                               mask_from_map(r));
    }
    return out;
}

inline bool run_peaks(const PipelineConfig& cfg, const fs::path& map_path, const fs::path& out,
                      bool force = false) {
    const std::string stage = "stats-peaks";
    if (outputs_current({out}, stage, cfg, force)) return true;
    require_file(map_path, "map");
    const encoding::RMap m = encoding::RMap::load(map_path);
    const stats::PeakResult peaks = stats::peak_regions(m, cfg.stats.percentile);
    map_from_mask(peaks.mask, m.grid,
                  {{"kind", "mask"},
                   {"percentile", cfg.stats.percentile},
                   {"threshold", peaks.threshold},
                   {"degenerate", peaks.degenerate}})
        .save(out);
    write_provenance(out, stage, cfg, {map_path.string()});
    return false;
}

inline bool run_unique(const PipelineConfig& cfg, const fs::path& joint_path,
                       const fs::path& single_path, const fs::path& out, bool force = false) {
    const std::string stage = "stats-unique";
    if (outputs_current({out}, stage, cfg, force)) return true;
    require_file(joint_path, "joint r map");
    require_file(single_path, "single r map");
    stats::unique_contribution(encoding::RMap::load(joint_path),
                               encoding::RMap::load(single_path))
        .save(out);
    write_provenance(out, stage, cfg, {joint_path.string(), single_path.string()});
    return false;
}

inline io::json decode_result_json(const decode::CvResult& model, const decode::CvResult& dummy,
                                   const std::vector<std::string>& class_names,
                                   const std::string& dummy_name) {
    io::json j;
    j["mean_accuracy"] = model.mean_accuracy;
    j["fold_accuracy"] = model.fold_accuracy;
    j["fold_runs"] = model.fold_runs;
    j["fold_converged"] = model.fold_converged;
    j["dummy"] = {{"strategy", dummy_name},
                  {"mean_accuracy", dummy.mean_accuracy},
                  {"fold_accuracy", dummy.fold_accuracy}};
    j["classes"] = class_names;
    j["accuracy_over_dummy"] =
        dummy.mean_accuracy > 0.0 ? model.mean_accuracy / dummy.mean_accuracy : 0.0;
    return j;
}

inline bool run_decode_cv(const PipelineConfig& cfg, const fs::path& emb_path,
                          const fs::path& labels_path, const fs::path& corpus_path,
                          const fs::path& out_json, bool force = false) {
    const std::string stage = "decode-cv";
    if (outputs_current({out_json}, stage, cfg, force)) return true;
    require_file(emb_path, "embedding matrix");
    require_file(labels_path, "labels");
    require_file(corpus_path, "annotated corpus");
    const embed::EmbeddingMatrix em = embed::EmbeddingMatrix::load(emb_path);
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    const decode::LabeledData data = make_labeled(em, load_labels(labels_path), c);
    const decode::CvResult model = decode::cv_decode(data, cfg.decode.l2, cfg.decode.max_iter);
    const decode::DummyStrategy strategy = cfg.decode.dummy == "most_frequent"
                                               ? decode::DummyStrategy::MostFrequent
                                               : decode::DummyStrategy::PriorSampling;
    const decode::CvResult dummy = decode::cv_dummy(data, strategy);
    io::write_json(out_json, decode_result_json(model, dummy, data.class_names, cfg.decode.dummy));
    write_provenance(out_json, stage, cfg,
                     {emb_path.string(), labels_path.string(), corpus_path.string()});
    return false;
}

inline bool run_decode_fit(const PipelineConfig& cfg, const fs::path& emb_path,
                           const fs::path& labels_path, const fs::path& corpus_path,
                           const fs::path& out_json, bool force = false) {
    const std::string stage = "decode-fit";
    if (outputs_current({out_json}, stage, cfg, force)) return true;
    require_file(emb_path, "embedding matrix");
    require_file(labels_path, "labels");
    require_file(corpus_path, "annotated corpus");
    const embed::EmbeddingMatrix em = embed::EmbeddingMatrix::load(emb_path);
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    decode::LabeledData data = make_labeled(em, load_labels(labels_path), c);
    Eigen::MatrixXd x = data.x;
    Eigen::MatrixXd dummy_test = x;
    decode::detail::scale_train_test(x, dummy_test);
    const decode::LogisticModel model =
        decode::fit_logistic(x, data.labels, cfg.decode.l2, cfg.decode.max_iter);
    io::json j;
    j["train_accuracy"] = decode::accuracy(decode::predict(model, x), data.labels);
    j["converged"] = model.converged;
    j["iterations"] = model.iterations;
    j["final_loss"] = model.final_loss;
    j["final_grad_norm"] = model.final_grad_norm;
    j["classes"] = data.class_names;
    j["n_rows"] = data.labels.size();
    io::write_json(out_json, j);
    write_provenance(out_json, stage, cfg,
                     {emb_path.string(), labels_path.string(), corpus_path.string()});
    return false;
}

inline bool run_synth_corpus(const PipelineConfig& cfg, const fs::path& out_dir,
                             bool force = false) {
    const std::string stage = "synth-corpus";
    const fs::path corpus_path = out_dir / "corpus.tsv";
    const fs::path trees_path = out_dir / "trees.txt";
    const fs::path sem_labels = out_dir / "semantic_labels.tsv";
    const fs::path syn_labels = out_dir / "syntactic_labels.tsv";
    if (outputs_current({corpus_path, trees_path, sem_labels, syn_labels}, stage, cfg, force))
        return true;
    fs::create_directories(out_dir / "rms");
    synth::GrammarConfig g;
    g.grammar_size = cfg.synth.grammar_size;
    g.speech_rate_s = cfg.synth.speech_rate_s;
    g.sentence_gap_s = cfg.synth.sentence_gap_s;
    const synth::SynthCorpus sc = synth::gen_corpus(g, cfg.synth.length, cfg.synth.n_runs,
                                                    PipelineConfig::stage_seed(cfg.seed, "synth"));
    corpus::save_annotated(corpus_path, sc.annotated);
    {
        std::ofstream os(trees_path);
        if (!os) throw DataError("cannot open for writing: " + trees_path.string());
        for (const auto& t : sc.trees) os << t << '\n';
    }
    save_labels(sem_labels, sc.semantic_labels);
    save_labels(syn_labels, sc.syntactic_labels);
    for (std::size_t r = 0; r < sc.rms.size(); ++r)
        encoding::write_events_csv(out_dir / "rms" / ("run_" + std::to_string(r + 1) + ".csv"),
                                   sc.rms[r]);
    for (const auto& p : {corpus_path, trees_path, sem_labels, syn_labels})
        write_provenance(p, stage, cfg, {});
    return false;
}

inline bool run_synth_bold(const PipelineConfig& cfg, const fs::path& corpus_path,
                           const fs::path& x_syn_path, const fs::path& x_sem_path,
                           const fs::path& out_dir, bool force = false) {
    const std::string stage = "synth-bold";
    const fs::path layout_path = out_dir / "layout.json";
    if (outputs_current({layout_path}, stage, cfg, force)) return true;
    require_file(corpus_path, "annotated corpus");
    require_file(x_syn_path, "syntactic embedding matrix");
    require_file(x_sem_path, "semantic embedding matrix");
    const corpus::AnnotatedCorpus c = corpus::ingest_annotated(corpus_path);
    const embed::EmbeddingMatrix ex = embed::EmbeddingMatrix::load(x_syn_path);
    const embed::EmbeddingMatrix em = embed::EmbeddingMatrix::load(x_sem_path);
    const int n_tokens = static_cast<int>(c.tokens.size());
    const Eigen::MatrixXd x_syn = embed::scatter_to_tokens(ex, n_tokens).x;
    const Eigen::MatrixXd x_sem = embed::scatter_to_tokens(em, n_tokens).x;

    const synth::VoxelLayout layout = synth::VoxelLayout::standard(cfg.synth.snr);
    const encoding::HrfKernel kernel =
        encoding::hrf_kernel(cfg.encode.hrf_dt_s, cfg.encode.hrf_duration_s);
    const std::uint64_t base_seed = PipelineConfig::stage_seed(cfg.seed, "synth-bold");

    fs::create_directories(out_dir);
    synth::GroundTruth truth;
    for (int s = 1; s <= cfg.synth.n_subjects; ++s) {
        auto [runs, gt] = synth::gen_bold(x_syn, x_sem, c, layout, kernel, cfg.synth.tr_s,
                                          cfg.synth.n_scans, base_seed, s);
        const fs::path subj_dir = out_dir / ("subj_" + std::to_string(s));
        fs::create_directories(subj_dir);
        for (const auto& run : runs)
            run.save(subj_dir / ("run_" + std::to_string(run.run_id) + ".bold"));
        truth = std::move(gt);
    }
    io::write_json(layout_path, layout.to_json());
    io::write_matrix(out_dir / "beta_syn.mat", truth.beta_syn);
    io::write_matrix(out_dir / "beta_sem.mat", truth.beta_sem);
    write_provenance(layout_path, stage, cfg,
                     {corpus_path.string(), x_syn_path.string(), x_sem_path.string()});
    return false;
}

// Render per-slice PGM images and a one-row-per-map CSV summary.
inline void run_report(const std::vector<fs::path>& map_paths, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream csv(out_dir / "summary.csv");
    if (!csv) throw DataError("cannot open for writing: " + (out_dir / "summary.csv").string());
    csv << "map,n_voxels,min,max,mean,n_positive\n";
    for (const auto& p : map_paths) {
        require_file(p, "map");
        const encoding::RMap m = encoding::RMap::load(p);
        const double lo = m.values.minCoeff();
        const double hi = m.values.maxCoeff();
        int n_pos = 0;
        for (Eigen::Index v = 0; v < m.values.size(); ++v)
            if (m.values(v) > 0.0) ++n_pos;
        csv << p.filename().string() << ',' << m.values.size() << ',' << lo << ',' << hi << ','
            << m.values.mean() << ',' << n_pos << '\n';
        const std::string base = p.stem().string();
        for (int z = 0; z < m.grid.nz; ++z) {
            std::vector<unsigned char> pixels(
                static_cast<std::size_t>(m.grid.nx) * static_cast<std::size_t>(m.grid.ny));
            for (int y = 0; y < m.grid.ny; ++y)
                for (int x = 0; x < m.grid.nx; ++x) {
                    const double v = m.values(m.grid.index(x, y, z));
                    const double scaled = hi > lo ? (v - lo) / (hi - lo) : 0.0;
                    pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(m.grid.nx) +
                           static_cast<std::size_t>(x)] =
                        static_cast<unsigned char>(std::lround(scaled * 255.0));
                }
            io::write_pgm(out_dir / (base + "_z" + std::to_string(z) + ".pgm"), m.grid.nx,
                          m.grid.ny, pixels);
        }
    }
    if (!csv) throw DataError("write failed: " + (out_dir / "summary.csv").string());
}

}  // namespace irnlm::pipeline
