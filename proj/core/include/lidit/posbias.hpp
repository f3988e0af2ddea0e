#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lidit/dataset.hpp"
#include "lidit/image.hpp"
#include "lidit/rng.hpp"

namespace lidit {

struct BenchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// adj-noun composition prompt; position of a segment is its 1-based rank
struct CompositionPrompt {
    std::vector<std::pair<std::string, std::string>> segments;  // (adjective, noun)
    std::string text;
    uint64_t seed = 0;  // per-prompt sampling stream
};

struct BenchVocab {
    std::vector<std::string> adjectives;
    std::vector<std::string> nouns;
    static BenchVocab standard();  // the corpus palette and shape inventory
};

// Deterministic prompt set: segment count uniform in [min_segments,
// max_segments] (min defaults to min(2, max)), nouns drawn without
// replacement within a prompt, adjectives independently uniform.
std::vector<CompositionPrompt> generate_prompts(const BenchVocab& vocab, int64_t n, int max_segments,
                                                uint64_t seed, int min_segments = 0);

struct SegmentScorer {
    virtual ~SegmentScorer() = default;
    // alignment of one segment against one image, in [0, 1]
    virtual double score(const Image& image, const std::string& adjective,
                         const std::string& noun) const = 0;
};

// Geometric/color oracle over the synthetic corpus: scores 1 when a
// connected region of the adjective's color classifies as the noun's shape
// (template IoU argmax), else 0. Exact on images the corpus renderer
// produced.
struct OracleScorer final : SegmentScorer {
    double iou_threshold = 0.5;
    int min_area = 12;
    double color_cutoff = 110.0;  // max RGB distance to claim a palette color

    double score(const Image& image, const std::string& adjective,
                 const std::string& noun) const override;
};

struct PromptResult {
    std::string text;
    int64_t n_segments = 0;
    std::vector<double> segment_scores;  // mean over the prompt's images
    bool excluded = false;
    std::string failure;
};

struct BenchReport {
    std::vector<double> per_position_mean;  // index p-1 = 1-based position p
    std::vector<int64_t> counts;            // prompts contributing at position p
    int64_t n_prompts = 0;
    int64_t n_images_per_prompt = 0;
    int64_t exclusions = 0;
    std::vector<PromptResult> raw;
};

// produces the images for one prompt; a thrown exception excludes the prompt
using ImageSampler = std::function<std::vector<Image>(const CompositionPrompt&, int64_t n_images)>;

BenchReport run_bench(const std::vector<CompositionPrompt>& prompts, int64_t images_per_prompt,
                      const ImageSampler& sampler, const SegmentScorer& scorer);

std::string bench_report_json(const BenchReport& report, const std::string& config_desc);
std::string bench_report_csv(const BenchReport& report);
Image bench_report_chart(const BenchReport& report);  // simple line chart

}  // namespace lidit
