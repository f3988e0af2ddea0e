#include "lidit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lidit {

const std::vector<PaletteColor>& palette_colors() {
    static const std::vector<PaletteColor> colors = {
        {"red", 230, 40, 40},   {"green", 40, 200, 60},   {"blue", 50, 70, 230},
        {"yellow", 235, 215, 50}, {"purple", 160, 50, 215}, {"cyan", 45, 215, 215},
    };
    return colors;
}

const std::vector<std::string>& shape_names() {
    static const std::vector<std::string> names = {
        "circle", "square", "triangle", "cross", "diamond", "ring", "stripe", "pillar",
    };
    return names;
}

PaletteColor background_color() { return {"background", 20, 20, 20}; }

int color_index(const std::string& name) {
    const auto& cs = palette_colors();
    for (size_t i = 0; i < cs.size(); ++i)
        if (cs[i].name == name) return static_cast<int>(i);
    return -1;
}

int shape_index(const std::string& name) {
    const auto& ns = shape_names();
    for (size_t i = 0; i < ns.size(); ++i)
        if (ns[i] == name) return static_cast<int>(i);
    return -1;
}

bool shape_contains(ShapeKind kind, int cx, int cy, int size, int x, int y) {
    int half = size / 2;
    int dx = x - cx, dy = y - cy;
    int arm = std::max(1, size / 6);  // bar half-thickness for cross/stripe/pillar
    switch (kind) {
        case ShapeKind::Circle:
            return dx * dx + dy * dy <= half * half;
        case ShapeKind::Square:
            return std::abs(dx) <= half && std::abs(dy) <= half;
        case ShapeKind::Triangle: {
            // apex up, flat bottom
            if (dy < -half || dy > half) return false;
            double t = static_cast<double>(dy + half) / static_cast<double>(size);
            return std::abs(dx) <= t * half + 1e-9;
        }
        case ShapeKind::Cross:
            return (std::abs(dx) <= arm && std::abs(dy) <= half) ||
                   (std::abs(dy) <= arm && std::abs(dx) <= half);
        case ShapeKind::Diamond:
            return std::abs(dx) + std::abs(dy) <= half;
        case ShapeKind::Ring: {
            int r2 = dx * dx + dy * dy;
            int inner = half / 2;
            return r2 <= half * half && r2 > inner * inner;
        }
        case ShapeKind::Stripe:
            return std::abs(dy) <= arm && std::abs(dx) <= half;
        case ShapeKind::Pillar:
            return std::abs(dx) <= arm && std::abs(dy) <= half;
        default:
            return false;
    }
}

void draw_shape(Image& img, const ShapeSpec& spec) {
    const PaletteColor& c = palette_colors()[static_cast<size_t>(spec.color)];
    int half = spec.size / 2;
    for (int y = std::max(0, spec.cy - half); y <= std::min(img.h - 1, spec.cy + half); ++y)
        for (int x = std::max(0, spec.cx - half); x <= std::min(img.w - 1, spec.cx + half); ++x)
            if (shape_contains(spec.kind, spec.cx, spec.cy, spec.size, x, y)) {
                uint8_t* p = img.px(x, y);
                p[0] = c.r;
                p[1] = c.g;
                p[2] = c.b;
            }
}

std::string render_prompt_text(const std::vector<std::pair<std::string, std::string>>& segments) {
    if (segments.empty()) throw std::runtime_error("prompt text needs at least one segment");
    std::string out;
    size_t n = segments.size();
    for (size_t i = 0; i < n; ++i) {
        std::string article = (i == 0) ? "A " : "a ";
        std::string seg = article + segments[i].first + " " + segments[i].second;
        if (i == 0) {
            out = seg;
        } else if (n == 2) {
            out += " and " + seg;
        } else if (i + 1 == n) {
            out += ", and " + seg;
        } else {
            out += ", " + seg;
        }
    }
    return out + ".";
}

Image render_scene(const std::vector<ShapeSpec>& shapes, int image_size) {
    PaletteColor bg = background_color();
    Image img(image_size, image_size, bg.r, bg.g, bg.b);
    for (const auto& s : shapes) draw_shape(img, s);
    return img;
}

SceneRecord corpus_record(const CorpusConfig& cfg, int64_t index) {
    Rng rng(Rng::fold(cfg.seed, 0x5ce7e), static_cast<uint64_t>(index) << 8);
    const auto& colors = palette_colors();
    int n_kinds = static_cast<int>(ShapeKind::Count);
    if (cfg.max_shapes > n_kinds)
        throw std::runtime_error("corpus: max_shapes exceeds shape inventory");

    int n;
    if (rng.next_uniform() < cfg.single_fraction || cfg.max_shapes == 1)
        n = 1;
    else
        n = static_cast<int>(rng.next_int(2, cfg.max_shapes));

    // shapes kinds without replacement
    std::vector<int> kinds(static_cast<size_t>(n_kinds));
    for (int i = 0; i < n_kinds; ++i) kinds[static_cast<size_t>(i)] = i;
    for (int i = n_kinds - 1; i > 0; --i)
        std::swap(kinds[static_cast<size_t>(i)], kinds[static_cast<size_t>(rng.next_int(0, i))]);

    SceneRecord rec;
    std::vector<std::pair<std::string, std::string>> segments;
    if (n == 1) {
        int color = static_cast<int>(rng.next_int(0, static_cast<int64_t>(colors.size()) - 1));
        int size = 12 + 2 * static_cast<int>(rng.next_int(0, 4));  // 12..20 even
        int half = size / 2;
        int lo = half + 1, hi = cfg.image_size - half - 2;
        int cx = static_cast<int>(rng.next_int(lo, hi));
        int cy = static_cast<int>(rng.next_int(lo, hi));
        rec.shapes.push_back({static_cast<ShapeKind>(kinds[0]), color, cx, cy, size});
        segments.emplace_back(colors[static_cast<size_t>(color)].name,
                              shape_names()[static_cast<size_t>(kinds[0])]);
    } else {
        // place shapes on a 3x3 cell grid, one per cell
        int cells = 3;
        int cell_px = cfg.image_size / cells;
        std::vector<int> cell_ids(static_cast<size_t>(cells * cells));
        for (int i = 0; i < cells * cells; ++i) cell_ids[static_cast<size_t>(i)] = i;
        for (int i = cells * cells - 1; i > 0; --i)
            std::swap(cell_ids[static_cast<size_t>(i)], cell_ids[static_cast<size_t>(rng.next_int(0, i))]);
        for (int s = 0; s < n; ++s) {
            int color = static_cast<int>(rng.next_int(0, static_cast<int64_t>(colors.size()) - 1));
            int size = 6 + 2 * static_cast<int>(rng.next_int(0, 1));  // 6 or 8
            // size-8 shapes fill their cell; jitter would let same-color
            // neighbors touch and merge into one region
            int jitter = size == 8 ? 0 : 1;
            int cell = cell_ids[static_cast<size_t>(s)];
            int cx = (cell % cells) * cell_px + cell_px / 2 +
                     static_cast<int>(rng.next_int(-jitter, jitter));
            int cy = (cell / cells) * cell_px + cell_px / 2 +
                     static_cast<int>(rng.next_int(-jitter, jitter));
            rec.shapes.push_back({static_cast<ShapeKind>(kinds[static_cast<size_t>(s)]), color, cx, cy, size});
            segments.emplace_back(colors[static_cast<size_t>(color)].name,
                                  shape_names()[static_cast<size_t>(kinds[static_cast<size_t>(s)])]);
        }
    }
    rec.caption = render_prompt_text(segments);
    return rec;
}

}  // namespace lidit
