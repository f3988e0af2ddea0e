#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "lidit/posbias.hpp"

using namespace lidit;

namespace {

// renders exactly the scene a prompt describes, one shape per grid cell
Image render_prompt_scene(const CompositionPrompt& prompt, int image_size = 32) {
    Rng rng(prompt.seed);
    std::vector<ShapeSpec> shapes;
    int cells = 3, cell_px = image_size / cells;
    std::vector<int> cell_ids(9);
    for (int i = 0; i < 9; ++i) cell_ids[static_cast<size_t>(i)] = i;
    for (int i = 8; i > 0; --i)
        std::swap(cell_ids[static_cast<size_t>(i)], cell_ids[static_cast<size_t>(rng.next_int(0, i))]);
    for (size_t s = 0; s < prompt.segments.size(); ++s) {
        ShapeSpec spec;
        spec.kind = static_cast<ShapeKind>(shape_index(prompt.segments[s].second));
        spec.color = color_index(prompt.segments[s].first);
        int cell = cell_ids[s];
        spec.cx = (cell % cells) * cell_px + cell_px / 2;
        spec.cy = (cell / cells) * cell_px + cell_px / 2;
        spec.size = 8;
        shapes.push_back(spec);
    }
    return render_scene(shapes, image_size);
}

}  // namespace

TEST_CASE("corpus: deterministic records, caption template, scene rendering") {
    CorpusConfig cfg;
    cfg.seed = 5;
    cfg.size = 64;
    for (int64_t i = 0; i < 16; ++i) {
        SceneRecord a = corpus_record(cfg, i);
        SceneRecord b = corpus_record(cfg, i);
        CHECK(a.caption == b.caption);
        REQUIRE(a.shapes.size() == b.shapes.size());
        CHECK(a.shapes.size() >= 1);
        CHECK(a.shapes.size() <= 8);
        for (size_t s = 0; s < a.shapes.size(); ++s) {
            CHECK(a.shapes[s].cx == b.shapes[s].cx);
            CHECK(a.shapes[s].kind == b.shapes[s].kind);
        }
        Image ia = render_scene(a.shapes, cfg.image_size);
        Image ib = render_scene(b.shapes, cfg.image_size);
        CHECK(ia.rgb == ib.rgb);
    }

    // caption template examples
    CHECK(render_prompt_text({{"green", "bench"}, {"red", "car"}}) == "A green bench and a red car.");
    CHECK(render_prompt_text({{"red", "circle"}}) == "A red circle.");
    CHECK(render_prompt_text({{"green", "bench"}, {"red", "car"}, {"blue", "bowl"}, {"pink", "apple"}}) ==
          "A green bench, a red car, a blue bowl, and a pink apple.");
}

TEST_CASE("oracle scorer: exact on rendered scenes, zero on wrong attributes") {
    OracleScorer scorer;
    CorpusConfig cfg;
    cfg.seed = 9;
    cfg.size = 64;
    const auto& colors = palette_colors();
    const auto& nouns = shape_names();
    for (int64_t i = 0; i < 24; ++i) {
        SceneRecord rec = corpus_record(cfg, i);
        Image img = render_scene(rec.shapes, cfg.image_size);
        for (const ShapeSpec& s : rec.shapes) {
            const std::string& adj = colors[static_cast<size_t>(s.color)].name;
            const std::string& noun = nouns[static_cast<size_t>(static_cast<int>(s.kind))];
            CHECK(scorer.score(img, adj, noun) == 1.0);
        }
    }

    // single red circle: right answer 1, wrong color 0, wrong shape 0
    ShapeSpec circle{ShapeKind::Circle, color_index("red"), 16, 16, 14};
    Image img = render_scene({circle}, 32);
    CHECK(scorer.score(img, "red", "circle") == 1.0);
    CHECK(scorer.score(img, "blue", "circle") == 0.0);
    CHECK(scorer.score(img, "red", "square") == 0.0);
    CHECK(scorer.score(img, "red", "ring") == 0.0);

    CHECK_THROWS_AS(scorer.score(img, "mauve", "circle"), BenchError);
    CHECK_THROWS_AS(scorer.score(img, "red", "blob"), BenchError);
}

TEST_CASE("oracle scorer: every shape class is distinguishable on clean renders") {
    OracleScorer scorer;
    const auto& nouns = shape_names();
    for (int k = 0; k < static_cast<int>(ShapeKind::Count); ++k) {
        for (int size : {8, 12, 16}) {
            ShapeSpec spec{static_cast<ShapeKind>(k), color_index("green"), 16, 16, size};
            Image img = render_scene({spec}, 32);
            for (int other = 0; other < static_cast<int>(ShapeKind::Count); ++other) {
                double s = scorer.score(img, "green", nouns[static_cast<size_t>(other)]);
                CHECK(s == (other == k ? 1.0 : 0.0));
            }
        }
    }
}

TEST_CASE("generate_prompts: determinism, bounds, distinct nouns, rendering") {
    BenchVocab vocab = BenchVocab::standard();
    auto a = generate_prompts(vocab, 50, 8, 123);
    auto b = generate_prompts(vocab, 50, 8, 123);
    REQUIRE(a.size() == 50);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].text == b[i].text);
        CHECK(a[i].seed == b[i].seed);
        CHECK(a[i].segments.size() >= 2);
        CHECK(a[i].segments.size() <= 8);
        std::set<std::string> nouns;
        for (auto& [adj, noun] : a[i].segments) nouns.insert(noun);
        CHECK(nouns.size() == a[i].segments.size());  // no repeated noun
        CHECK(a[i].text == render_prompt_text(a[i].segments));
    }
    auto c = generate_prompts(vocab, 50, 8, 124);
    size_t same = 0;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].text == c[i].text) ++same;
    CHECK(same < 50);  // different seed gives a different set

    // single-segment prompts via max_segments = 1
    auto singles = generate_prompts(vocab, 10, 1, 125);
    for (const auto& p : singles) CHECK(p.segments.size() == 1);

    BenchVocab small;
    small.adjectives = {"red"};
    small.nouns = {"circle", "square"};
    CHECK_THROWS_AS(generate_prompts(small, 5, 3, 1), BenchError);
}

TEST_CASE("run_bench: aggregation arithmetic over scripted scores") {
    // one prompt, two segments; image scores {pos1: 1,0,1,1} {pos2: 0,0,0,0}
    CompositionPrompt prompt;
    prompt.segments = {{"red", "circle"}, {"blue", "square"}};
    prompt.text = render_prompt_text(prompt.segments);

    // encode the image index in the first pixel
    ImageSampler sampler = [](const CompositionPrompt&, int64_t n) {
        std::vector<Image> imgs;
        for (int64_t i = 0; i < n; ++i) {
            Image img(4, 4);
            img.rgb[0] = static_cast<uint8_t>(i);
            imgs.push_back(img);
        }
        return imgs;
    };
    struct ScriptedScorer final : SegmentScorer {
        double score(const Image& img, const std::string&, const std::string& noun) const override {
            int idx = img.rgb[0];
            if (noun == "circle") return (idx == 0 || idx == 2 || idx == 3) ? 1.0 : 0.0;
            return 0.0;
        }
    } scorer;

    BenchReport rep = run_bench({prompt}, 4, sampler, scorer);
    REQUIRE(rep.per_position_mean.size() == 2);
    CHECK(rep.per_position_mean[0] == 0.75);
    CHECK(rep.per_position_mean[1] == 0.0);
    CHECK(rep.counts[0] == 1);
    CHECK(rep.exclusions == 0);
}

TEST_CASE("run_bench: fractional scores pass through to raw records") {
    CompositionPrompt prompt;
    prompt.segments = {{"red", "circle"}};
    prompt.text = render_prompt_text(prompt.segments);
    ImageSampler sampler = [](const CompositionPrompt&, int64_t n) {
        return std::vector<Image>(static_cast<size_t>(n), Image(2, 2));
    };
    struct Fractional final : SegmentScorer {
        double score(const Image&, const std::string&, const std::string&) const override { return 0.37; }
    } scorer;
    BenchReport rep = run_bench({prompt}, 4, sampler, scorer);
    CHECK(rep.raw[0].segment_scores[0] == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("run_bench: sampler failures exclude the prompt and are counted") {
    BenchVocab vocab = BenchVocab::standard();
    auto prompts = generate_prompts(vocab, 4, 3, 99);
    ImageSampler sampler = [&](const CompositionPrompt& p, int64_t n) {
        if (p.text == prompts[1].text) throw std::runtime_error("sampler exploded");
        std::vector<Image> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(render_prompt_scene(p));
        return imgs;
    };
    OracleScorer scorer;
    BenchReport rep = run_bench(prompts, 2, sampler, scorer);
    CHECK(rep.exclusions == 1);
    CHECK(rep.raw[1].excluded);
    CHECK(rep.raw[1].failure == "sampler exploded");
    // excluded prompts do not contribute to the means
    int64_t contributing = 0;
    for (const auto& r : rep.raw)
        if (!r.excluded) ++contributing;
    CHECK(rep.counts[0] == contributing);
}

TEST_CASE("run_bench: renderer-backed images score 1.0 at every position") {
    BenchVocab vocab = BenchVocab::standard();
    auto prompts = generate_prompts(vocab, 20, 8, 7);
    ImageSampler sampler = [](const CompositionPrompt& p, int64_t n) {
        std::vector<Image> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(render_prompt_scene(p));
        return imgs;
    };
    OracleScorer scorer;
    BenchReport rep = run_bench(prompts, 2, sampler, scorer);
    CHECK(rep.exclusions == 0);
    for (double m : rep.per_position_mean) CHECK(m == 1.0);

    // permuting prompt order never changes the per-position means
    std::vector<CompositionPrompt> shuffled(prompts.rbegin(), prompts.rend());
    BenchReport rep2 = run_bench(shuffled, 2, sampler, scorer);
    REQUIRE(rep2.per_position_mean.size() == rep.per_position_mean.size());
    for (size_t p = 0; p < rep.per_position_mean.size(); ++p) {
        CHECK(rep2.per_position_mean[p] == rep.per_position_mean[p]);
        CHECK(rep2.counts[p] == rep.counts[p]);
    }

    // positions beyond the largest generated prompt are absent, not zero
    auto pairs = generate_prompts(vocab, 6, 2, 8);
    BenchReport small = run_bench(pairs, 1, sampler, scorer);
    CHECK(small.per_position_mean.size() == 2);
}

TEST_CASE("bench report: deterministic serialization and chart") {
    BenchVocab vocab = BenchVocab::standard();
    auto prompts = generate_prompts(vocab, 6, 4, 31);
    ImageSampler sampler = [](const CompositionPrompt& p, int64_t n) {
        std::vector<Image> imgs;
        for (int64_t i = 0; i < n; ++i) imgs.push_back(render_prompt_scene(p));
        return imgs;
    };
    OracleScorer scorer;
    std::string j1 = bench_report_json(run_bench(prompts, 2, sampler, scorer), "cfg");
    std::string j2 = bench_report_json(run_bench(prompts, 2, sampler, scorer), "cfg");
    CHECK(j1 == j2);
    CHECK(j1.find("per_position_mean") != std::string::npos);

    std::string csv = bench_report_csv(run_bench(prompts, 2, sampler, scorer));
    CHECK(csv.find("position,mean,n") == 0);

    Image chart = bench_report_chart(run_bench(prompts, 2, sampler, scorer));
    CHECK(chart.w > 0);
    CHECK(chart.h > 0);
}
