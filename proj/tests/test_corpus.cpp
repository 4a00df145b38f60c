#include <catch2/catch_amalgamated.hpp>

#include <irnlm/corpus.hpp>

#include "testutil.hpp"

#include <string>
#include <vector>

using namespace irnlm;
using corpus::Mode;
using testutil::TempDir;

namespace {

io::TsvRow row(std::size_t line_no, std::vector<std::string> fields) {
    return io::TsvRow{line_no, std::move(fields)};
}

std::vector<std::string> ok_fields(const std::string& surface, const std::string& pos,
                                   const std::string& morph, int ncn, int content,
                                   double onset, double offset, int run) {
    return {surface, pos,
            morph,   std::to_string(ncn),
            std::to_string(content), std::to_string(onset),
            std::to_string(offset),  std::to_string(run)};
}

corpus::AnnotatedCorpus tiny_corpus() {
    std::vector<io::TsvRow> rows = {
        row(1, ok_fields("the", "DET", "Definite=Def", 1, 0, 0.0, 0.3, 1)),
        row(2, ok_fields("bar", "NOUN", "Number=Sing", 1, 1, 0.3, 0.6, 1)),
        row(3, ok_fields("lop", "VERB", "Tense=Past", 2, 1, 0.6, 0.9, 1)),
        row(4, ok_fields("gal", "NOUN", "Number=Sing", 1, 1, 0.0, 0.3, 2)),
        row(5, ok_fields(".", "PUNCT", "_", 2, 0, 0.3, 0.6, 2)),
    };
    return corpus::parse_annotated(rows, "tiny");
}

}  // namespace

TEST_CASE("closing_nodes counts constituents ending at each word") {
    REQUIRE(corpus::closing_nodes("(NP (DT The) (JJ sixth) (NN planet))") ==
            std::vector<int>{1, 1, 2});
    REQUIRE(corpus::closing_nodes("(A (B (C x) (D y)))") == std::vector<int>{1, 3});
    REQUIRE(corpus::closing_nodes("(X a)") == std::vector<int>{1});
    REQUIRE(corpus::closing_nodes("(A (B x) (C y))") == std::vector<int>{1, 2});
    REQUIRE(corpus::closing_nodes("(S (NP (DT the) (NN bar)) (VP (VB lop)))") ==
            std::vector<int>{1, 2, 3});
}

TEST_CASE("closing_nodes totals equal the number of constituents") {
    const std::string tree = "(S (NP (DT the) (NN bar)) (VP (VB lop) (NP (DT the) (NN gal))))";
    const auto counts = corpus::closing_nodes(tree);
    long total = 0;
    for (int c : counts) total += c;
    long opens = 0;
    for (char c : tree)
        if (c == '(') ++opens;
    REQUIRE(total == opens);
}

TEST_CASE("closing_nodes rejects malformed trees") {
    REQUIRE_THROWS_AS(corpus::closing_nodes(""), DataError);
    REQUIRE_THROWS_AS(corpus::closing_nodes("(A x) (B y)"), DataError);  // two roots
    REQUIRE_THROWS_AS(corpus::closing_nodes("(A (B x)"), DataError);     // unbalanced (
    REQUIRE_THROWS_AS(corpus::closing_nodes("(A x))"), DataError);       // unbalanced )
    REQUIRE_THROWS_AS(corpus::closing_nodes("(A ())"), DataError);       // empty constituent
    REQUIRE_THROWS_AS(corpus::closing_nodes("(A)"), DataError);          // closes before a word
    REQUIRE_THROWS_AS(corpus::closing_nodes("x"), DataError);            // word outside a tree
}

TEST_CASE("closing_nodes leaf-count overload enforces the width") {
    REQUIRE(corpus::closing_nodes("(X a)", 1) == std::vector<int>{1});
    REQUIRE_THROWS_AS(corpus::closing_nodes("(X a)", 2), DataError);
}

TEST_CASE("parse_annotated reads the eight-column format") {
    const corpus::AnnotatedCorpus c = tiny_corpus();
    REQUIRE(c.tokens.size() == 5);
    REQUIRE(c.n_runs == 2);
    REQUIRE(c.tokens[0].surface == "the");
    REQUIRE(c.tokens[0].pos == "DET");
    REQUIRE(c.tokens[0].morph == "Definite=Def");
    REQUIRE(c.tokens[0].ncn == 1);
    REQUIRE_FALSE(c.tokens[0].is_content);
    REQUIRE(c.tokens[1].is_content);
    REQUIRE(c.tokens[1].onset_s == Catch::Approx(0.3));
    REQUIRE(c.tokens[3].run_id == 2);
    REQUIRE(c.run_token_indices(2) == std::vector<int>{3, 4});
}

TEST_CASE("parse_annotated validates every field") {
    auto base = ok_fields("dog", "NOUN", "Number=Sing", 1, 1, 0.0, 0.3, 1);

    {
        auto f = base;
        f.pop_back();
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[4] = "yes";
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[3] = "-1";
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[3] = "two";
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[5] = "0.5";  // onset after offset
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[7] = "0";
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }
    {
        auto f = base;
        f[0] = "";
        REQUIRE_THROWS_AS(corpus::parse_annotated({row(1, f)}, "t"), DataError);
    }

    // Onsets must not move backwards within one run.
    REQUIRE_THROWS_AS(
        corpus::parse_annotated({row(1, ok_fields("a", "NOUN", "_", 1, 1, 1.0, 1.3, 1)),
                                 row(2, ok_fields("b", "NOUN", "_", 1, 1, 0.5, 0.8, 1))},
                                "t"),
        DataError);

    // A fresh run may restart the clock.
    REQUIRE_NOTHROW(
        corpus::parse_annotated({row(1, ok_fields("a", "NOUN", "_", 1, 1, 1.0, 1.3, 1)),
                                 row(2, ok_fields("b", "NOUN", "_", 1, 1, 0.0, 0.3, 2))},
                                "t"));

    // Run ids must be contiguous from 1.
    REQUIRE_THROWS_AS(
        corpus::parse_annotated({row(1, ok_fields("a", "NOUN", "_", 1, 1, 0.0, 0.3, 1)),
                                 row(2, ok_fields("b", "NOUN", "_", 1, 1, 0.0, 0.3, 3))},
                                "t"),
        DataError);
}

TEST_CASE("annotated corpora survive a save/ingest round trip") {
    TempDir tmp;
    const corpus::AnnotatedCorpus c = tiny_corpus();
    const auto path = tmp / "corpus.tsv";
    corpus::save_annotated(path, c);
    const corpus::AnnotatedCorpus back = corpus::ingest_annotated(path);
    REQUIRE(back.tokens.size() == c.tokens.size());
    REQUIRE(back.n_runs == c.n_runs);
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        REQUIRE(back.tokens[i].surface == c.tokens[i].surface);
        REQUIRE(back.tokens[i].pos == c.tokens[i].pos);
        REQUIRE(back.tokens[i].morph == c.tokens[i].morph);
        REQUIRE(back.tokens[i].ncn == c.tokens[i].ncn);
        REQUIRE(back.tokens[i].is_content == c.tokens[i].is_content);
        REQUIRE(back.tokens[i].onset_s == Catch::Approx(c.tokens[i].onset_s));
        REQUIRE(back.tokens[i].run_id == c.tokens[i].run_id);
    }
}

TEST_CASE("restrict_stream projects the three views") {
    const corpus::AnnotatedCorpus c = tiny_corpus();

    const auto integral = corpus::restrict_stream(c, Mode::Integral);
    REQUIRE(integral.items == std::vector<std::string>{"the", "bar", "lop", "gal", "."});
    REQUIRE(integral.alignment == std::vector<int>{0, 1, 2, 3, 4});
    REQUIRE(integral.n_source_tokens == 5);

    const auto semantic = corpus::restrict_stream(c, Mode::Semantic);
    REQUIRE(semantic.items == std::vector<std::string>{"bar", "lop", "gal"});
    REQUIRE(semantic.alignment == std::vector<int>{1, 2, 3});

    const auto syntactic = corpus::restrict_stream(c, Mode::Syntactic);
    REQUIRE(syntactic.items.size() == 5);
    REQUIRE(syntactic.items[0] == "DET|Definite=Def|1");
    REQUIRE(syntactic.items[2] == "VERB|Tense=Past|2");
    REQUIRE(syntactic.alignment == integral.alignment);

    corpus::AnnotatedCorpus none;
    REQUIRE_THROWS_AS(corpus::restrict_stream(none, Mode::Integral), DataError);
}

TEST_CASE("mode names round-trip") {
    REQUIRE(corpus::mode_from_name("integral") == Mode::Integral);
    REQUIRE(corpus::mode_from_name("semantic") == Mode::Semantic);
    REQUIRE(corpus::mode_from_name("syntactic") == Mode::Syntactic);
    REQUIRE(std::string(corpus::mode_name(Mode::Syntactic)) == "syntactic");
    REQUIRE_THROWS_AS(corpus::mode_from_name("lexical"), ConfigError);
}

TEST_CASE("feature streams survive a save/load round trip") {
    TempDir tmp;
    const corpus::AnnotatedCorpus c = tiny_corpus();
    const auto stream = corpus::restrict_stream(c, Mode::Semantic);

    const auto path = tmp / "sem.stream";
    corpus::save_stream(stream, path);
    const auto back = corpus::load_stream(path);
    REQUIRE(back.mode == stream.mode);
    REQUIRE(back.items == stream.items);
    REQUIRE(back.alignment == stream.alignment);
    REQUIRE(back.n_source_tokens == stream.n_source_tokens);
}

TEST_CASE("load_stream rejects malformed files") {
    TempDir tmp;
    const auto path = tmp / "bad.stream";

    io::write_text(path, "bar\t0\n");  // headers missing
    REQUIRE_THROWS_AS(corpus::load_stream(path), DataError);

    io::write_text(path, "# mode=semantic\n# n_source_tokens=2\nbar\tzero\n");
    REQUIRE_THROWS_AS(corpus::load_stream(path), DataError);

    io::write_text(path, "# mode=semantic\n# n_source_tokens=2\nbar\t5\n");
    REQUIRE_THROWS_AS(corpus::load_stream(path), DataError);

    io::write_text(path, "# mode=semantic\n# n_source_tokens=2\n");
    REQUIRE_THROWS_AS(corpus::load_stream(path), DataError);
}

TEST_CASE("build_vocabulary orders by frequency then name after the reserved ids") {
    corpus::FeatureStream s;
    s.mode = Mode::Semantic;
    s.items = {"bb", "aa", "bb", "cc", "aa", "bb"};
    s.alignment = {0, 1, 2, 3, 4, 5};
    s.n_source_tokens = 6;

    const corpus::Vocabulary v = corpus::build_vocabulary(s);
    REQUIRE(v.size() == 6);
    REQUIRE(v.feature_of(0) == "<eos>");
    REQUIRE(v.feature_of(1) == "<unk>");
    REQUIRE(v.feature_of(2) == "<sp>");
    REQUIRE(v.feature_of(3) == "bb");  // 3 occurrences
    REQUIRE(v.feature_of(4) == "aa");  // 2, ties under cc broken by name
    REQUIRE(v.feature_of(5) == "cc");
    REQUIRE(v.id_of("bb") == 3);
    REQUIRE(v.id_of("never-seen") == corpus::Vocabulary::kUnknownId);
    REQUIRE_THROWS_AS(v.feature_of(6), DataError);
    REQUIRE_THROWS_AS(v.feature_of(-1), DataError);
}

TEST_CASE("tied frequencies come out lexicographically") {
    corpus::FeatureStream s;
    s.mode = Mode::Integral;
    s.items = {"zz", "mm", "aa"};
    s.alignment = {0, 1, 2};
    s.n_source_tokens = 3;
    const corpus::Vocabulary v = corpus::build_vocabulary(s);
    REQUIRE(v.feature_of(3) == "aa");
    REQUIRE(v.feature_of(4) == "mm");
    REQUIRE(v.feature_of(5) == "zz");
}

TEST_CASE("build_vocabulary rejects reserved feature names and mixed modes") {
    corpus::FeatureStream s;
    s.mode = Mode::Integral;
    s.items = {"<eos>"};
    s.alignment = {0};
    s.n_source_tokens = 1;
    REQUIRE_THROWS_AS(corpus::build_vocabulary(s), DataError);

    corpus::FeatureStream a = s, b = s;
    a.items = {"x"};
    b.items = {"y"};
    b.mode = Mode::Semantic;
    REQUIRE_THROWS_AS(corpus::build_vocabulary(std::vector<corpus::FeatureStream>{a, b}),
                      DataError);
}

TEST_CASE("vocabulary files round-trip and are validated on load") {
    TempDir tmp;
    corpus::FeatureStream s;
    s.mode = Mode::Syntactic;
    s.items = {"NOUN|Number=Sing|2", "VERB|Tense=Past|1", "NOUN|Number=Sing|2"};
    s.alignment = {0, 1, 2};
    s.n_source_tokens = 3;
    const corpus::Vocabulary v = corpus::build_vocabulary(s);

    const auto path = tmp / "vocab.tsv";
    v.save(path);
    const corpus::Vocabulary back = corpus::Vocabulary::load(path);
    REQUIRE(back.size() == v.size());
    REQUIRE(back.mode() == Mode::Syntactic);
    for (int i = 0; i < v.size(); ++i) REQUIRE(back.feature_of(i) == v.feature_of(i));

    io::write_text(path, "0\t<eos>\n2\t<sp>\n");  // gap in ids
    REQUIRE_THROWS_AS(corpus::Vocabulary::load(path), DataError);

    io::write_text(path, "0\t<eos>\n1\t<unk>\n2\tword\n");  // reserved slot misused
    REQUIRE_THROWS_AS(corpus::Vocabulary::load(path), DataError);
}

TEST_CASE("encode_ids maps items through the vocabulary") {
    corpus::FeatureStream s;
    s.mode = Mode::Integral;
    s.items = {"b", "a", "b"};
    s.alignment = {0, 1, 2};
    s.n_source_tokens = 3;
    const corpus::Vocabulary v = corpus::build_vocabulary(s);
    REQUIRE(corpus::encode_ids(s, v) == std::vector<int>{3, 4, 3});

    corpus::FeatureStream other = s;
    other.items = {"a", "zzz", "b"};
    REQUIRE(corpus::encode_ids(other, v) == std::vector<int>{4, 1, 3});
}

TEST_CASE("verify_ncn accepts matching trees and flags disagreements") {
    std::vector<io::TsvRow> rows = {
        row(1, ok_fields("the", "DET", "_", 1, 0, 0.0, 0.3, 1)),
        row(2, ok_fields("bar", "NOUN", "_", 2, 1, 0.3, 0.6, 1)),
        row(3, ok_fields("lop", "VERB", "_", 3, 1, 0.6, 0.9, 1)),
    };
    const auto c = corpus::parse_annotated(rows, "t");
    const std::vector<std::string> good = {"(S (NP (DT the) (NN bar)) (VP (VB lop)))"};
    REQUIRE_NOTHROW(corpus::verify_ncn(c, good));

    const std::vector<std::string> wrong = {"(S (DT the) (NP (NN bar) (VB lop)))"};
    REQUIRE_THROWS_AS(corpus::verify_ncn(c, wrong), DataError);

    const std::vector<std::string> short_cover = {"(S (DT the) (NN bar))"};
    REQUIRE_THROWS_AS(corpus::verify_ncn(c, short_cover), DataError);
}

TEST_CASE("read_trees skips comments and blank lines") {
    TempDir tmp;
    const auto path = tmp / "trees.txt";
    io::write_text(path, "# one per sentence\n(X a)\n\n(Y b)\n");
    REQUIRE(corpus::read_trees(path) == std::vector<std::string>{"(X a)", "(Y b)"});
}

TEST_CASE("default_is_content keeps open-class words minus auxiliaries") {
    REQUIRE(corpus::default_is_content("NOUN", "planet"));
    REQUIRE(corpus::default_is_content("VERB", "ran"));
    REQUIRE(corpus::default_is_content("ADJ", "sixth"));
    REQUIRE(corpus::default_is_content("ADV", "quickly"));
    REQUIRE_FALSE(corpus::default_is_content("DET", "the"));
    REQUIRE_FALSE(corpus::default_is_content("ADP", "of"));
    REQUIRE_FALSE(corpus::default_is_content("PUNCT", "."));
    REQUIRE_FALSE(corpus::default_is_content("VERB", "was"));
    REQUIRE_FALSE(corpus::default_is_content("VERB", "Have"));
}
