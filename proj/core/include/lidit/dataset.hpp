#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lidit/image.hpp"
#include "lidit/rng.hpp"

namespace lidit {

// ---------------------------------------------------------------------------
// palette and shape inventory shared by the corpus renderer, the caption
// templates, the benchmark vocabulary, and the oracle scorer
// ---------------------------------------------------------------------------

struct PaletteColor {
    std::string name;
    uint8_t r, g, b;
};

enum class ShapeKind : int {
    Circle = 0,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Stripe,
    Pillar,
    Count
};

const std::vector<PaletteColor>& palette_colors();   // adjectives
const std::vector<std::string>& shape_names();       // nouns, indexed by ShapeKind
PaletteColor background_color();
int color_index(const std::string& name);            // -1 when unknown
int shape_index(const std::string& name);            // -1 when unknown

// true when (x, y) lies inside the shape centered at (cx, cy) with even
// bounding-box side `size`
bool shape_contains(ShapeKind kind, int cx, int cy, int size, int x, int y);

struct ShapeSpec {
    ShapeKind kind;
    int color;  // palette index
    int cx, cy;
    int size;   // even bounding-box side
};

void draw_shape(Image& img, const ShapeSpec& spec);

// Renders the prompt text template shared by corpus captions and benchmark
// prompts: "A red circle." / "A red circle and a blue square." /
// "A red circle, a blue square, and a green ring."
std::string render_prompt_text(const std::vector<std::pair<std::string, std::string>>& segments);

// ---------------------------------------------------------------------------
// procedural corpus
// ---------------------------------------------------------------------------

struct CorpusConfig {
    uint64_t seed = 0;
    int64_t size = 4096;
    int image_size = 32;
    int max_shapes = 8;
    double single_fraction = 0.4;  // share of one-shape scenes
};

struct SceneRecord {
    std::vector<ShapeSpec> shapes;
    std::string caption;
};

// Deterministic record for a corpus index; regenerating with the same
// (seed, index) always yields the same scene.
SceneRecord corpus_record(const CorpusConfig& cfg, int64_t index);
Image render_scene(const std::vector<ShapeSpec>& shapes, int image_size);

}  // namespace lidit
