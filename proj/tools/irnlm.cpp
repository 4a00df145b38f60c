// Command-line front end for the voxelwise-encoding toolkit. Every
// subcommand maps onto one pipeline stage; numeric parameters come from
// a JSON config file and can be overridden with flags (overrides are
// folded back into the config before hashing, so provenance sidecars
// stay honest).

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "irnlm/pipeline.hpp"

namespace {

using irnlm::io::json;
using irnlm::pipeline::PipelineConfig;
namespace fs = std::filesystem;
namespace pl = irnlm::pipeline;

struct GlobalOpts {
    std::string config_path;
    bool force = false;
    int threads = 0;
    std::vector<std::string> overrides;  // section.key=value collected from flags
};

// Fold "section.key=json_value" overrides into the raw config so the
// derived hash reflects what actually ran.
PipelineConfig make_config(const GlobalOpts& g) {
    json raw = json::object();
    if (!g.config_path.empty()) {
        pl::require_file(g.config_path, "config file");
        raw = irnlm::io::read_json(g.config_path);
    }
    for (const std::string& ov : g.overrides) {
        const auto eq = ov.find('=');
        const std::string path = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        const auto dot = path.find('.');
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;  // bare strings stay strings
        }
        if (dot == std::string::npos) {
            raw[path] = parsed;
        } else {
            raw[path.substr(0, dot)][path.substr(dot + 1)] = parsed;
        }
    }
    if (g.threads > 0) raw["threads"] = g.threads;
    return PipelineConfig::from_json(raw);
}

void note(bool skipped, const std::string& what) {
    if (skipped)
        std::cout << what << ": up to date, skipped\n";
    else
        std::cout << what << ": done\n";
}

}  // namespace

int run(int argc, char** argv) {
    CLI::App app{"information-restricted language model encoding toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // let --config/--force/--threads appear after the subcommand

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON config file (defaults apply when omitted)");
    app.add_flag("--force", g.force, "re-run stages even when outputs are up to date");
    app.add_option("--threads", g.threads, "worker cap (also IRNLM_THREADS env)");

    // ---- corpus ----
    auto* corpus_cmd = app.add_subcommand("corpus", "annotated corpus operations");
    corpus_cmd->require_subcommand(1);
    {
        auto* sub = corpus_cmd->add_subcommand("restrict", "project the corpus onto one stream");
        auto in = std::make_shared<std::string>();
        auto mode = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--in", *in, "annotated corpus TSV")->required();
        sub->add_option("--mode", *mode, "integral | semantic | syntactic")->required();
        sub->add_option("--out", *out, "output feature stream")->required();
        sub->callback([&g, in, mode, out] {
            note(pl::run_restrict(make_config(g), *in, *mode, *out, g.force), "restrict " + *mode);
        });
    }
    {
        auto* sub = corpus_cmd->add_subcommand("vocab", "build a vocabulary over streams");
        auto streams = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--stream", *streams, "feature stream (repeatable)")->required();
        sub->add_option("--out", *out, "output vocabulary TSV")->required();
        sub->callback([&g, streams, out] {
            std::vector<fs::path> paths(streams->begin(), streams->end());
            note(pl::run_vocab(make_config(g), paths, *out, g.force), "vocab");
        });
    }

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "fit a model on a feature stream");
    train_cmd->require_subcommand(1);
    {
        auto* sub = train_cmd->add_subcommand("glove", "co-occurrence embeddings");
        auto stream = std::make_shared<std::string>();
        auto vocab = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto loss = std::make_shared<std::string>();
        sub->add_option("--stream", *stream)->required();
        sub->add_option("--vocab", *vocab)->required();
        sub->add_option("--out", *out, "embedding table")->required();
        sub->add_option("--loss", *loss, "loss CSV")->required();
        sub->callback([&g, stream, vocab, out, loss] {
            note(pl::run_train_glove(make_config(g), *stream, *vocab, *out, *loss, g.force),
                 "train glove");
        });
    }
    {
        auto* sub = train_cmd->add_subcommand("gpt", "autoregressive transformer");
        auto stream = std::make_shared<std::string>();
        auto vocab = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto loss = std::make_shared<std::string>();
        auto k = std::make_shared<int>(-1);
        sub->add_option("--stream", *stream)->required();
        sub->add_option("--vocab", *vocab)->required();
        sub->add_option("--out", *out, "checkpoint")->required();
        sub->add_option("--loss", *loss, "loss CSV")->required();
        sub->add_option("--context-k", *k, "train on fixed k-token context rows");
        sub->callback([&g, stream, vocab, out, loss, k] {
            GlobalOpts local = g;
            if (*k >= 0) local.overrides.push_back("gpt.context_k=" + std::to_string(*k));
            note(pl::run_train_gpt(make_config(local), *stream, *vocab, *out, *loss, g.force),
                 "train gpt");
        });
    }

    // ---- embed ----
    auto* embed_cmd = app.add_subcommand("embed", "extract per-token embeddings");
    embed_cmd->require_subcommand(1);
    for (const std::string proto : {"static", "sliding", "limited"}) {
        auto* sub = embed_cmd->add_subcommand(
            proto, proto == "static"    ? "rows straight from an embedding table"
                   : proto == "sliding" ? "transformer states over a sliding window"
                                        : "transformer states with a fixed context cap");
        auto stream = std::make_shared<std::string>();
        auto vocab = std::make_shared<std::string>();
        auto model = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto window = std::make_shared<int>(-1);
        auto k = std::make_shared<int>(-1);
        auto layer = std::make_shared<int>(-1);
        sub->add_option("--stream", *stream)->required();
        sub->add_option("--vocab", *vocab)->required();
        sub->add_option("--model", *model, "embedding table or checkpoint")->required();
        sub->add_option("--out", *out)->required();
        if (proto == "sliding") sub->add_option("--window", *window, "window length N");
        if (proto == "limited") sub->add_option("--k", *k, "context cap k");
        if (proto != "static") sub->add_option("--layer", *layer, "1-based block to read");
        sub->callback([&g, proto, stream, vocab, model, out, window, k, layer] {
            GlobalOpts local = g;
            const std::string name = proto == "limited" ? "context_limited" : proto;
            local.overrides.push_back("embed.protocol=" + name);
            if (*window > 0) local.overrides.push_back("embed.window=" + std::to_string(*window));
            if (*k > 0) local.overrides.push_back("embed.k=" + std::to_string(*k));
            if (*layer > 0) local.overrides.push_back("embed.layer=" + std::to_string(*layer));
            note(pl::run_embed(make_config(local), *stream, *vocab, *model, *out, g.force),
                 "embed " + name);
        });
    }

    // ---- encode ----
    auto* encode_cmd = app.add_subcommand("encode", "voxelwise encoding models");
    encode_cmd->require_subcommand(1);
    {
        auto* sub = encode_cmd->add_subcommand("fit", "nested-CV ridge R map");
        auto emb = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto bold = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto rms = std::make_shared<std::string>();
        auto with_baseline = std::make_shared<bool>(false);
        sub->add_option("--emb", *emb, "embedding matrix")->required();
        sub->add_option("--corpus", *corpus, "annotated corpus TSV")->required();
        sub->add_option("--bold", *bold, "directory with run_<i>.bold")->required();
        sub->add_option("--out", *out, "output R map")->required();
        sub->add_flag("--with-baseline", *with_baseline, "append nuisance regressors");
        sub->add_option("--rms", *rms, "directory with run_<i>.csv loudness series");
        sub->callback([&g, emb, corpus, bold, out, rms, with_baseline] {
            if (*with_baseline && rms->empty())
                throw irnlm::ConfigError("--with-baseline requires --rms");
            note(pl::run_encode_fit(make_config(g), *emb, *corpus, *bold, *out, *with_baseline,
                                    *rms, g.force),
                 "encode fit");
        });
    }
    {
        auto* sub = encode_cmd->add_subcommand("baseline", "nuisance-only R map");
        auto corpus = std::make_shared<std::string>();
        auto rms = std::make_shared<std::string>();
        auto bold = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--corpus", *corpus)->required();
        sub->add_option("--rms", *rms, "directory with run_<i>.csv")->required();
        sub->add_option("--bold", *bold)->required();
        sub->add_option("--out", *out)->required();
        sub->callback([&g, corpus, rms, bold, out] {
            note(pl::run_encode_baseline(make_config(g), *corpus, *rms, *bold, *out, g.force),
                 "encode baseline");
        });
    }
    {
        auto* sub = encode_cmd->add_subcommand("delta", "R difference map");
        auto full = std::make_shared<std::string>();
        auto reduced = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--full", *full)->required();
        sub->add_option("--reduced", *reduced)->required();
        sub->add_option("--out", *out)->required();
        sub->callback([&g, full, reduced, out] {
            note(pl::run_delta(make_config(g), *full, *reduced, *out, g.force), "encode delta");
        });
    }

    // ---- stats ----
    auto* stats_cmd = app.add_subcommand("stats", "group statistics over subject maps");
    stats_cmd->require_subcommand(1);
    {
        auto* sub = stats_cmd->add_subcommand("group", "smooth, t-test, FDR");
        auto maps = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        auto q = std::make_shared<double>(-1.0);
        auto fwhm = std::make_shared<double>(-1.0);
        sub->add_option("--map", *maps, "subject map (repeatable)")->required();
        sub->add_option("--out", *out, "output prefix")->required();
        sub->add_option("--q", *q, "FDR level");
        sub->add_option("--fwhm", *fwhm, "smoothing FWHM in mm");
        sub->callback([&g, maps, out, q, fwhm] {
            GlobalOpts local = g;
            if (*q > 0) local.overrides.push_back("stats.q=" + std::to_string(*q));
            if (*fwhm >= 0) local.overrides.push_back("stats.fwhm_mm=" + std::to_string(*fwhm));
            std::vector<fs::path> paths(maps->begin(), maps->end());
            note(pl::run_group(make_config(local), paths, *out, g.force), "stats group");
        });
    }
    {
        auto* sub = stats_cmd->add_subcommand("specificity", "log10 semantic/syntactic R ratio");
        auto sem = std::make_shared<std::vector<std::string>>();
        auto syn = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        auto valid = std::make_shared<std::string>();
        sub->add_option("--sem", *sem, "semantic R map (repeatable)")->required();
        sub->add_option("--syn", *syn, "syntactic R map (repeatable)")->required();
        sub->add_option("--out", *out, "output map")->required();
        sub->add_option("--valid", *valid, "output validity mask")->required();
        sub->callback([&g, sem, syn, out, valid] {
            std::vector<fs::path> sems(sem->begin(), sem->end());
            std::vector<fs::path> syns(syn->begin(), syn->end());
            note(pl::run_specificity(make_config(g), sems, syns, *out, *valid, g.force),
                 "stats specificity");
        });
    }
    {
        auto* sub = stats_cmd->add_subcommand("jaccard", "overlap between two masks");
        auto a = std::make_shared<std::string>();
        auto b = std::make_shared<std::string>();
        auto region = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--a", *a)->required();
        sub->add_option("--b", *b)->required();
        sub->add_option("--region", *region, "restrict to this mask");
        sub->add_option("--out", *out, "write JSON here as well");
        sub->callback([a, b, region, out] {
            const json j = pl::run_jaccard(*a, *b, region->empty() ? fs::path{} : fs::path(*region));
            std::cout << j.dump(2) << '\n';
            if (!out->empty()) irnlm::io::write_json(*out, j);
        });
    }
    {
        auto* sub = stats_cmd->add_subcommand("peaks", "top-percentile mask of a map");
        auto map = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto pct = std::make_shared<double>(-1.0);
        sub->add_option("--map", *map)->required();
        sub->add_option("--out", *out)->required();
        sub->add_option("--percentile", *pct, "cut at this percentile");
        sub->callback([&g, map, out, pct] {
            GlobalOpts local = g;
            if (*pct > 0) local.overrides.push_back("stats.percentile=" + std::to_string(*pct));
            note(pl::run_peaks(make_config(local), *map, *out, g.force), "stats peaks");
        });
    }
    {
        auto* sub = stats_cmd->add_subcommand("unique", "joint-minus-reduced contribution map");
        auto joint = std::make_shared<std::string>();
        auto single = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--joint", *joint)->required();
        sub->add_option("--single", *single)->required();
        sub->add_option("--out", *out)->required();
        sub->callback([&g, joint, single, out] {
            note(pl::run_unique(make_config(g), *joint, *single, *out, g.force), "stats unique");
        });
    }

    // ---- decode ----
    auto* decode_cmd = app.add_subcommand("decode", "label decoding from embeddings");
    decode_cmd->require_subcommand(1);
    for (const std::string kind : {"fit", "cv"}) {
        auto* sub = decode_cmd->add_subcommand(
            kind, kind == "fit" ? "fit on all rows, report training accuracy"
                                : "leave-one-run-out accuracy with dummy baseline");
        auto emb = std::make_shared<std::string>();
        auto labels = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--emb", *emb)->required();
        sub->add_option("--labels", *labels, "token_index<TAB>label TSV")->required();
        sub->add_option("--corpus", *corpus)->required();
        sub->add_option("--out", *out, "results JSON")->required();
        sub->callback([&g, kind, emb, labels, corpus, out] {
            const bool skipped =
                kind == "fit"
                    ? pl::run_decode_fit(make_config(g), *emb, *labels, *corpus, *out, g.force)
                    : pl::run_decode_cv(make_config(g), *emb, *labels, *corpus, *out, g.force);
            note(skipped, "decode " + kind);
        });
    }

    // ---- synth ----
    auto* synth_cmd = app.add_subcommand("synth", "synthetic corpus and recordings");
    synth_cmd->require_subcommand(1);
    {
        auto* sub = synth_cmd->add_subcommand("corpus", "template-grammar corpus with labels");
        auto out = std::make_shared<std::string>();
        sub->add_option("--out", *out, "output directory")->required();
        sub->callback([&g, out] {
            note(pl::run_synth_corpus(make_config(g), *out, g.force), "synth corpus");
        });
    }
    {
        auto* sub = synth_cmd->add_subcommand("bold", "pseudo-subject recordings + ground truth");
        auto corpus = std::make_shared<std::string>();
        auto x_syn = std::make_shared<std::string>();
        auto x_sem = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--corpus", *corpus)->required();
        sub->add_option("--x-syn", *x_syn, "syntactic embedding matrix")->required();
        sub->add_option("--x-sem", *x_sem, "semantic embedding matrix")->required();
        sub->add_option("--out", *out, "output directory")->required();
        sub->callback([&g, corpus, x_syn, x_sem, out] {
            note(pl::run_synth_bold(make_config(g), *corpus, *x_syn, *x_sem, *out, g.force),
                 "synth bold");
        });
    }

    // ---- report ----
    {
        auto* sub = app.add_subcommand("report", "PGM slices and a CSV summary for maps");
        auto maps = std::make_shared<std::vector<std::string>>();
        auto out = std::make_shared<std::string>();
        sub->add_option("--map", *maps, "map file (repeatable)")->required();
        sub->add_option("--out", *out, "output directory")->required();
        sub->callback([maps, out] {
            std::vector<fs::path> paths(maps->begin(), maps->end());
            pl::run_report(paths, *out);
            std::cout << "report: done\n";
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return irnlm::ConfigError::exit_code;
    }
    return 0;
}

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const irnlm::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return irnlm::ConfigError::exit_code;
    } catch (const irnlm::DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return irnlm::DataError::exit_code;
    } catch (const irnlm::NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return irnlm::NumericError::exit_code;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
