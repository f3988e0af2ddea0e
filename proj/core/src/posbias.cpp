#include "lidit/posbias.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace lidit {

BenchVocab BenchVocab::standard() {
    BenchVocab v;
    for (const auto& c : palette_colors()) v.adjectives.push_back(c.name);
    v.nouns = shape_names();
    return v;
}

std::vector<CompositionPrompt> generate_prompts(const BenchVocab& vocab, int64_t n, int max_segments,
                                                uint64_t seed, int min_segments) {
    if (vocab.adjectives.empty() || vocab.nouns.empty()) throw BenchError("prompt vocab is empty");
    if (n < 1) throw BenchError("need at least one prompt");
    if (max_segments < 1 || max_segments > 8) throw BenchError("max_segments must lie in [1, 8]");
    if (static_cast<size_t>(max_segments) > vocab.nouns.size())
        throw BenchError("vocab has fewer nouns than max_segments: " +
                         std::to_string(vocab.nouns.size()) + " < " + std::to_string(max_segments));
    if (min_segments == 0) min_segments = std::min(2, max_segments);
    if (min_segments < 1 || min_segments > max_segments) throw BenchError("bad min_segments");

    std::vector<CompositionPrompt> prompts;
    prompts.reserve(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        Rng rng(Rng::fold(Rng::fold(seed, 0xbe7c4), static_cast<uint64_t>(i)));
        int k = static_cast<int>(rng.next_int(min_segments, max_segments));
        // nouns without replacement
        std::vector<size_t> order(vocab.nouns.size());
        for (size_t j = 0; j < order.size(); ++j) order[j] = j;
        for (size_t j = order.size() - 1; j > 0; --j)
            std::swap(order[j], order[static_cast<size_t>(rng.next_int(0, static_cast<int64_t>(j)))]);

        CompositionPrompt p;
        for (int s = 0; s < k; ++s) {
            const std::string& adj = vocab.adjectives[static_cast<size_t>(
                rng.next_int(0, static_cast<int64_t>(vocab.adjectives.size()) - 1))];
            p.segments.emplace_back(adj, vocab.nouns[order[static_cast<size_t>(s)]]);
        }
        p.text = render_prompt_text(p.segments);
        p.seed = Rng::fold(Rng::fold(seed, 0x5a3b1e), static_cast<uint64_t>(i));
        prompts.push_back(std::move(p));
    }
    return prompts;
}

namespace {

// nearest palette entry (background included); -1 when nothing is close
int classify_pixel(const uint8_t* px, double cutoff) {
    const auto& colors = palette_colors();
    PaletteColor bg = background_color();
    double best = cutoff * cutoff;
    int best_idx = -1;
    auto dist2 = [&](const PaletteColor& c) {
        double dr = static_cast<double>(px[0]) - c.r;
        double dg = static_cast<double>(px[1]) - c.g;
        double db = static_cast<double>(px[2]) - c.b;
        return dr * dr + dg * dg + db * db;
    };
    double d = dist2(bg);
    if (d <= best) {
        best = d;
        best_idx = -1;  // background stays "no color"
    }
    for (size_t i = 0; i < colors.size(); ++i) {
        d = dist2(colors[i]);
        if (d < best) {
            best = d;
            best_idx = static_cast<int>(i);
        }
    }
    return best_idx;
}

struct Component {
    std::vector<int> xs, ys;
    int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
    void push(int x, int y) {
        xs.push_back(x);
        ys.push_back(y);
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }
    size_t area() const { return xs.size(); }
};

std::vector<Component> color_components(const Image& img, int color, double cutoff) {
    int w = img.w, h = img.h;
    std::vector<int8_t> match(static_cast<size_t>(w) * h, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (classify_pixel(img.px(x, y), cutoff) == color) match[static_cast<size_t>(y) * w + x] = 1;
    std::vector<int8_t> seen(static_cast<size_t>(w) * h, 0);
    std::vector<Component> comps;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t idx = static_cast<size_t>(y) * w + x;
            if (!match[idx] || seen[idx]) continue;
            Component c;
            stack.push_back({x, y});
            seen[idx] = 1;
            while (!stack.empty()) {
                auto [cx, cy] = stack.back();
                stack.pop_back();
                c.push(cx, cy);
                const int dx[4] = {1, -1, 0, 0};
                const int dy[4] = {0, 0, 1, -1};
                for (int k = 0; k < 4; ++k) {
                    int nx = cx + dx[k], ny = cy + dy[k];
                    if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                    size_t nidx = static_cast<size_t>(ny) * w + nx;
                    if (match[nidx] && !seen[nidx]) {
                        seen[nidx] = 1;
                        stack.push_back({nx, ny});
                    }
                }
            }
            comps.push_back(std::move(c));
        }
    return comps;
}

// IoU between a component and the template of `kind` rendered at the
// component's bounding-box center with the given size
double template_iou(const Component& c, ShapeKind kind, int cx, int cy, int size) {
    int half = size / 2;
    int inter = 0, tmpl_area = 0;
    std::vector<int8_t> in_comp;
    int bw = std::max(c.x1, cx + half) - std::min(c.x0, cx - half) + 1;
    int bh = std::max(c.y1, cy + half) - std::min(c.y0, cy - half) + 1;
    int ox = std::min(c.x0, cx - half), oy = std::min(c.y0, cy - half);
    in_comp.assign(static_cast<size_t>(bw) * bh, 0);
    for (size_t i = 0; i < c.area(); ++i)
        in_comp[static_cast<size_t>(c.ys[i] - oy) * bw + (c.xs[i] - ox)] = 1;
    for (int y = cy - half; y <= cy + half; ++y)
        for (int x = cx - half; x <= cx + half; ++x)
            if (shape_contains(kind, cx, cy, size, x, y)) {
                ++tmpl_area;
                if (x >= ox && y >= oy && x - ox < bw && y - oy < bh &&
                    in_comp[static_cast<size_t>(y - oy) * bw + (x - ox)])
                    ++inter;
            }
    int uni = tmpl_area + static_cast<int>(c.area()) - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

double OracleScorer::score(const Image& image, const std::string& adjective,
                           const std::string& noun) const {
    int color = color_index(adjective);
    int shape = shape_index(noun);
    if (color < 0) throw BenchError("oracle scorer: unknown adjective '" + adjective + "'");
    if (shape < 0) throw BenchError("oracle scorer: unknown noun '" + noun + "'");

    for (const Component& c : color_components(image, color, color_cutoff)) {
        if (static_cast<int>(c.area()) < min_area) continue;
        int cx = (c.x0 + c.x1) / 2;
        int cy = (c.y0 + c.y1) / 2;
        int w = c.x1 - c.x0, h = c.y1 - c.y0;
        // size candidates cover elongated shapes whose bbox is not square
        std::vector<int> sizes = {std::max(w, h)};
        if (w != h) {
            sizes.push_back(w);
            sizes.push_back(h);
        }
        double best_iou = -1.0;
        int best_kind = -1;
        for (int k = 0; k < static_cast<int>(ShapeKind::Count); ++k)
            for (int s : sizes) {
                if (s < 2) continue;
                double iou = template_iou(c, static_cast<ShapeKind>(k), cx, cy, s);
                if (iou > best_iou) {
                    best_iou = iou;
                    best_kind = k;
                }
            }
        if (best_kind == shape && best_iou >= iou_threshold) return 1.0;
    }
    return 0.0;
}

BenchReport run_bench(const std::vector<CompositionPrompt>& prompts, int64_t images_per_prompt,
                      const ImageSampler& sampler, const SegmentScorer& scorer) {
    if (images_per_prompt < 1) throw BenchError("images_per_prompt must be at least 1");
    BenchReport report;
    report.n_prompts = static_cast<int64_t>(prompts.size());
    report.n_images_per_prompt = images_per_prompt;

    size_t max_pos = 0;
    for (const auto& p : prompts) max_pos = std::max(max_pos, p.segments.size());
    std::vector<double> sums(max_pos, 0.0);
    std::vector<int64_t> counts(max_pos, 0);

    for (const auto& prompt : prompts) {
        PromptResult r;
        r.text = prompt.text;
        r.n_segments = static_cast<int64_t>(prompt.segments.size());
        try {
            std::vector<Image> images = sampler(prompt, images_per_prompt);
            if (static_cast<int64_t>(images.size()) != images_per_prompt)
                throw BenchError("sampler returned wrong image count");
            for (size_t s = 0; s < prompt.segments.size(); ++s) {
                double acc = 0.0;
                for (const Image& img : images)
                    acc += scorer.score(img, prompt.segments[s].first, prompt.segments[s].second);
                r.segment_scores.push_back(acc / static_cast<double>(images_per_prompt));
            }
        } catch (const std::exception& e) {
            r.excluded = true;
            r.failure = e.what();
            ++report.exclusions;
        }
        if (!r.excluded)
            for (size_t s = 0; s < r.segment_scores.size(); ++s) {
                sums[s] += r.segment_scores[s];
                ++counts[s];
            }
        report.raw.push_back(std::move(r));
    }

    for (size_t p = 0; p < max_pos; ++p) {
        if (counts[p] == 0) break;  // positions with no data are absent, not zero
        report.per_position_mean.push_back(sums[p] / static_cast<double>(counts[p]));
        report.counts.push_back(counts[p]);
    }
    return report;
}

std::string bench_report_json(const BenchReport& report, const std::string& config_desc) {
    nlohmann::ordered_json j;
    j["config"] = config_desc;
    j["n_prompts"] = report.n_prompts;
    j["n_images_per_prompt"] = report.n_images_per_prompt;
    j["per_position_mean"] = report.per_position_mean;
    j["counts"] = report.counts;
    j["exclusions"] = report.exclusions;
    nlohmann::ordered_json raw = nlohmann::ordered_json::array();
    for (const auto& r : report.raw) {
        nlohmann::ordered_json e;
        e["text"] = r.text;
        e["n_segments"] = r.n_segments;
        e["segment_scores"] = r.segment_scores;
        e["excluded"] = r.excluded;
        if (r.excluded) e["failure"] = r.failure;
        raw.push_back(std::move(e));
    }
    j["raw"] = std::move(raw);
    return j.dump(2) + "\n";
}

std::string bench_report_csv(const BenchReport& report) {
    std::string out = "position,mean,n\n";
    char buf[64];
    for (size_t p = 0; p < report.per_position_mean.size(); ++p) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g,%lld\n", p + 1, report.per_position_mean[p],
                      static_cast<long long>(report.counts[p]));
        out += buf;
    }
    return out;
}

Image bench_report_chart(const BenchReport& report) {
    const int w = 320, h = 200, margin = 24;
    Image img(w, h, 255, 255, 255);
    auto put = [&](int x, int y, uint8_t r, uint8_t g, uint8_t b) {
        if (x < 0 || x >= w || y < 0 || y >= h) return;
        uint8_t* p = img.px(x, y);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    };
    // axes
    for (int x = margin; x < w - margin / 2; ++x) put(x, h - margin, 60, 60, 60);
    for (int y = margin / 2; y <= h - margin; ++y) put(margin, y, 60, 60, 60);
    size_t n = report.per_position_mean.size();
    if (n == 0) return img;
    auto px_of = [&](size_t p) {
        if (n == 1) return margin + (w - 2 * margin) / 2;
        return margin + static_cast<int>((w - 2 * margin) * p / (n - 1));
    };
    auto py_of = [&](double v) { return h - margin - static_cast<int>(v * (h - 2 * margin)); };
    for (size_t p = 0; p + 1 < n; ++p) {
        int x0 = px_of(p), y0 = py_of(report.per_position_mean[p]);
        int x1 = px_of(p + 1), y1 = py_of(report.per_position_mean[p + 1]);
        int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
        for (int s = 0; s <= steps; ++s) {
            int x = x0 + (x1 - x0) * s / steps;
            int y = y0 + (y1 - y0) * s / steps;
            put(x, y, 200, 40, 40);
            put(x, y + 1, 200, 40, 40);
        }
    }
    for (size_t p = 0; p < n; ++p) {
        int x = px_of(p), y = py_of(report.per_position_mean[p]);
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx) put(x + dx, y + dy, 40, 40, 200);
    }
    return img;
}

}  // namespace lidit
