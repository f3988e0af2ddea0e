#include "lidit/config.hpp"
#include "lidit/fixture_spec.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace lidit {

namespace {

struct Entry {
    std::string value;
    int line = 0;
    mutable bool used = false;
};

struct ParsedFile {
    std::string filename;
    // section -> key -> entry
    std::map<std::string, std::map<std::string, Entry>> sections;

    [[noreturn]] void fail(int line, const std::string& msg) const {
        throw ConfigError(filename + ":" + std::to_string(line) + ": " + msg);
    }

    const Entry* find(const std::string& section, const std::string& key) const {
        auto s = sections.find(section);
        if (s == sections.end()) return nullptr;
        auto k = s->second.find(key);
        if (k == s->second.end()) return nullptr;
        k->second.used = true;
        return &k->second;
    }

    std::string get_string(const std::string& sec, const std::string& key, const std::string& dflt) const {
        const Entry* e = find(sec, key);
        return e ? e->value : dflt;
    }

    std::string require_string(const std::string& sec, const std::string& key) const {
        const Entry* e = find(sec, key);
        if (!e) throw ConfigError(filename + ": missing required key '" + key + "' in section [" + sec + "]");
        return e->value;
    }

    int64_t parse_int(const Entry* e) const {
        try {
            size_t pos = 0;
            int64_t v = std::stoll(e->value, &pos);
            if (pos != e->value.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (...) {
            fail(e->line, "expected an integer, got '" + e->value + "'");
        }
    }

    double parse_double(const Entry* e) const {
        try {
            size_t pos = 0;
            double v = std::stod(e->value, &pos);
            if (pos != e->value.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (...) {
            fail(e->line, "expected a number, got '" + e->value + "'");
        }
    }

    bool parse_bool(const Entry* e) const {
        if (e->value == "on" || e->value == "true") return true;
        if (e->value == "off" || e->value == "false") return false;
        fail(e->line, "expected on/off, got '" + e->value + "'");
    }

    int64_t get_int(const std::string& sec, const std::string& key, int64_t dflt) const {
        const Entry* e = find(sec, key);
        return e ? parse_int(e) : dflt;
    }
    double get_double(const std::string& sec, const std::string& key, double dflt) const {
        const Entry* e = find(sec, key);
        return e ? parse_double(e) : dflt;
    }
    bool get_bool(const std::string& sec, const std::string& key, bool dflt) const {
        const Entry* e = find(sec, key);
        return e ? parse_bool(e) : dflt;
    }
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

ParsedFile parse_lines(const std::string& text, const std::string& filename) {
    ParsedFile pf;
    pf.filename = filename;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') pf.fail(line_no, "malformed section header '" + raw + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) pf.fail(line_no, "empty section name");
            pf.sections[section];  // declare
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) pf.fail(line_no, "expected 'key = value', got '" + raw + "'");
        if (section.empty()) pf.fail(line_no, "key outside any [section]");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) pf.fail(line_no, "empty key");
        auto [it, inserted] = pf.sections[section].emplace(key, Entry{value, line_no, false});
        if (!inserted) pf.fail(line_no, "duplicate key '" + key + "' in section [" + section + "]");
    }
    return pf;
}

const std::set<std::string>& known_sections() {
    static const std::set<std::string> s = {"model", "encoders", "refiners", "diffusion",
                                            "train", "data", "ablation"};
    return s;
}

bool encoder_key_allowed(const std::string& key, int64_t count) {
    static const std::set<std::string> plain = {"count", "instruction_text"};
    if (plain.count(key)) return true;
    for (int64_t i = 1; i <= count; ++i) {
        std::string p = "enc" + std::to_string(i) + ".";
        if (key.rfind(p, 0) == 0) {
            std::string field = key.substr(p.size());
            static const std::set<std::string> fields = {"kind", "seed", "d_enc", "n_layers",
                                                         "n_heads", "max_len", "id", "fixture_dir"};
            return fields.count(field) > 0;
        }
    }
    return false;
}

void check_known_keys(const ParsedFile& pf, int64_t enc_count) {
    static const std::map<std::string, std::set<std::string>> schema = {
        {"model",
         {"depth", "d_model", "n_heads", "patch_size", "in_channels", "ffn_expansion", "qk_norm",
          "qk_gamma_shared"}},
        {"refiners", {"token_heads", "collab_blocks", "collab_heads", "shared_gate_head"}},
        {"diffusion", {"T", "beta_start", "beta_end", "sigma_mode", "sample_steps", "cfg_scale"}},
        {"train",
         {"steps", "batch_size", "lr", "weight_decay", "grad_clip", "ema_decay", "cond_dropout",
          "checkpoint_every", "seed"}},
        {"data", {"corpus_seed", "corpus_size", "image_size", "max_shapes", "single_fraction"}},
        {"ablation",
         {"preset", "instruction", "token_refiner", "refiner_full_attention", "gating",
          "refiner_blocks", "fusion", "single_encoder"}},
    };
    for (const auto& [section, keys] : pf.sections) {
        if (!known_sections().count(section))
            throw ConfigError(pf.filename + ": unknown section [" + section + "]");
        for (const auto& [key, entry] : keys) {
            bool ok;
            if (section == "encoders") {
                ok = encoder_key_allowed(key, enc_count);
            } else {
                ok = schema.at(section).count(key) > 0;
            }
            if (!ok)
                pf.fail(entry.line, "unknown key '" + key + "' in section [" + section + "]");
        }
    }
}

FusionMode parse_fusion(const ParsedFile& pf, const Entry* e) {
    if (e->value == "single") return FusionMode::Single;
    if (e->value == "concat") return FusionMode::Concat;
    if (e->value == "collab") return FusionMode::Collab;
    pf.fail(e->line, "fusion must be single|concat|collab, got '" + e->value + "'");
}

std::string fusion_name(FusionMode m) {
    switch (m) {
        case FusionMode::Single: return "single";
        case FusionMode::Concat: return "concat";
        default: return "collab";
    }
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
    return h;
}

AblationSwitches resolve_ablation(const ParsedFile& pf) {
    AblationSwitches sw;
    const Entry* preset_e = pf.find("ablation", "preset");
    if (!preset_e)
        throw ConfigError(pf.filename +
                          ": section [ablation] must set 'preset' (use 'custom' for explicit switches)");
    sw.preset = preset_e->value;

    auto apply = [&](const std::string& key, const std::string& value, int line) {
        Entry tmp{value, line, false};
        if (key == "instruction") sw.instruction = pf.parse_bool(&tmp);
        else if (key == "token_refiner") sw.token_refiner = pf.parse_bool(&tmp);
        else if (key == "refiner_full_attention") sw.refiner_full_attention = pf.parse_bool(&tmp);
        else if (key == "gating") sw.gating = pf.parse_bool(&tmp);
        else if (key == "refiner_blocks") sw.refiner_blocks = pf.parse_int(&tmp);
        else if (key == "fusion") sw.fusion = parse_fusion(pf, &tmp);
        else if (key == "single_encoder") sw.single_encoder = pf.parse_int(&tmp);
        else throw ConfigError("unknown ablation switch '" + key + "'");
    };

    static const char* switch_keys[] = {"instruction",    "token_refiner", "refiner_full_attention",
                                        "gating",         "refiner_blocks", "fusion",
                                        "single_encoder"};
    if (sw.preset == "custom") {
        for (const char* key : switch_keys) {
            const Entry* e = pf.find("ablation", key);
            if (!e)
                throw ConfigError(pf.filename + ": ablation preset 'custom' requires explicit '" +
                                  std::string(key) + "'");
            apply(key, e->value, e->line);
        }
        return sw;
    }

    const auto& presets = ablation_presets();
    auto it = presets.find(sw.preset);
    if (it == presets.end()) {
        std::string names;
        for (const auto& [n, _] : presets) names += n + " ";
        pf.fail(preset_e->line, "unknown preset '" + sw.preset + "'; available: " + names + "custom");
    }
    for (const char* key : switch_keys)
        if (pf.find("ablation", key))
            pf.fail(pf.find("ablation", key)->line,
                    "preset '" + sw.preset + "' fixes the switches; use preset = custom to set '" +
                        std::string(key) + "'");
    for (const auto& [key, value] : it->second) apply(key, value, preset_e->line);
    return sw;
}

}  // namespace

const std::map<std::string, std::map<std::string, std::string>>& ablation_presets() {
    static const std::map<std::string, std::map<std::string, std::string>> presets = {
        {"default", {}},
        // component rows: instruction / token refiner / collaborative refiner
        {"t3_baseline", {{"instruction", "off"}, {"token_refiner", "off"}, {"fusion", "single"}}},
        {"t3_instruction", {{"token_refiner", "off"}, {"fusion", "single"}}},
        {"t3_token_refiner", {{"instruction", "off"}, {"fusion", "single"}}},
        {"t3_instr_refiner", {{"fusion", "single"}}},
        {"t3_full", {}},
        // causal-mask row: refiner with the causal mask re-applied
        {"t4_causal_refiner",
         {{"instruction", "off"}, {"fusion", "single"}, {"refiner_full_attention", "off"}}},
        // token-refiner design rows: depth and gating
        {"trd_n1", {{"instruction", "off"}, {"fusion", "single"}, {"refiner_blocks", "1"}}},
        {"trd_n2", {{"instruction", "off"}, {"fusion", "single"}}},
        {"trd_n3", {{"instruction", "off"}, {"fusion", "single"}, {"refiner_blocks", "3"}}},
        {"trd_no_gating", {{"instruction", "off"}, {"fusion", "single"}, {"gating", "off"}}},
        // fusion rows: single encoders, plain concatenation, collaborative
        {"t6_encoder1", {{"fusion", "single"}, {"single_encoder", "1"}}},
        {"t6_encoder2", {{"fusion", "single"}, {"single_encoder", "2"}}},
        {"t6_concat", {{"fusion", "concat"}}},
        {"t6_refiner", {}},
    };
    return presets;
}

RunConfig parse_run_config(const std::string& text, const std::string& filename) {
    ParsedFile pf = parse_lines(text, filename);
    int64_t enc_count = pf.get_int("encoders", "count", 2);
    check_known_keys(pf, enc_count);

    RunConfig rc;
    rc.ablation = resolve_ablation(pf);

    // [model]
    LIDiTConfig& bb = rc.model.backbone;
    bb.depth = pf.get_int("model", "depth", 8);
    bb.d_model = pf.get_int("model", "d_model", 256);
    bb.n_heads = pf.get_int("model", "n_heads", 8);
    bb.patch_size = pf.get_int("model", "patch_size", 2);
    bb.in_channels = pf.get_int("model", "in_channels", 3);
    bb.ffn_expansion = pf.get_int("model", "ffn_expansion", 4);
    bb.qk_norm = pf.get_bool("model", "qk_norm", true);
    bb.shared_qk_gamma = pf.get_bool("model", "qk_gamma_shared", false);
    if (bb.d_model % bb.n_heads != 0)
        throw ConfigError(filename + ": d_model must be divisible by n_heads");

    // [encoders]
    if (enc_count < 1 || enc_count > 4)
        throw ConfigError(filename + ": encoders count must lie in [1, 4]");
    for (int64_t i = 1; i <= enc_count; ++i) {
        std::string p = "enc" + std::to_string(i) + ".";
        EncoderSpec spec;
        std::string kind = pf.get_string("encoders", p + "kind", "toy");
        if (kind == "toy") {
            spec.kind = EncoderSpec::Kind::Toy;
        } else if (kind == "fixture") {
            spec.kind = EncoderSpec::Kind::FixtureDir;
            spec.fixture_dir = pf.require_string("encoders", p + "fixture_dir");
        } else {
            throw ConfigError(filename + ": " + p + "kind must be toy|fixture, got '" + kind + "'");
        }
        spec.toy.seed = static_cast<uint64_t>(pf.get_int("encoders", p + "seed", 100 + i));
        spec.toy.d_enc = pf.get_int("encoders", p + "d_enc", i == 1 ? 128 : 96);
        spec.toy.n_layers = pf.get_int("encoders", p + "n_layers", 4);
        spec.toy.n_heads = pf.get_int("encoders", p + "n_heads", 4);
        spec.toy.max_len = pf.get_int("encoders", p + "max_len", 160);
        spec.toy.id = pf.get_string("encoders", p + "id", "enc" + std::to_string(i));
        rc.model.encoders.push_back(std::move(spec));
    }

    // [refiners] + ablation switches -> pipeline
    PipelineConfig& pl = rc.model.pipeline;
    pl.instruction_enabled = rc.ablation.instruction;
    pl.instruction_text = pf.get_string("encoders", "instruction_text", kDefaultInstruction);
    pl.token_refiner_enabled = rc.ablation.token_refiner;
    pl.refiner_blocks = rc.ablation.refiner_blocks;
    pl.refiner_heads = pf.get_int("refiners", "token_heads", 4);
    pl.refiner_gating = rc.ablation.gating;
    pl.refiner_full_attention = rc.ablation.refiner_full_attention;
    pl.refiner_shared_gate_head = pf.get_bool("refiners", "shared_gate_head", false);
    pl.fusion = rc.ablation.fusion;
    if (rc.ablation.single_encoder < 1 || rc.ablation.single_encoder > enc_count)
        throw ConfigError(filename + ": single_encoder must reference a configured encoder");
    pl.single_encoder = static_cast<size_t>(rc.ablation.single_encoder - 1);
    pl.collab_blocks = pf.get_int("refiners", "collab_blocks", 1);
    pl.collab_heads = pf.get_int("refiners", "collab_heads", 8);
    pl.d_model = bb.d_model;
    if (pl.fusion != FusionMode::Single && enc_count < 2)
        throw ConfigError(filename + ": concat/collab fusion needs at least two encoders");

    // [diffusion]
    rc.train.T = pf.get_int("diffusion", "T", 1000);
    rc.train.beta_start = pf.get_double("diffusion", "beta_start", 1e-4);
    rc.train.beta_end = pf.get_double("diffusion", "beta_end", 0.02);
    std::string sigma = pf.get_string("diffusion", "sigma_mode", "beta");
    if (sigma == "beta") rc.train.sigma_mode = SigmaMode::Beta;
    else if (sigma == "alpha_bar_ratio") rc.train.sigma_mode = SigmaMode::AlphaBarRatio;
    else throw ConfigError(filename + ": sigma_mode must be beta|alpha_bar_ratio");
    rc.sample_steps = pf.get_int("diffusion", "sample_steps", 100);
    rc.cfg_scale = pf.get_double("diffusion", "cfg_scale", 4.0);

    // [train]
    rc.train.steps = pf.get_int("train", "steps", 20000);
    rc.train.batch_size = pf.get_int("train", "batch_size", 8);
    rc.train.adamw.lr = pf.get_double("train", "lr", 1e-4);
    rc.train.adamw.weight_decay = pf.get_double("train", "weight_decay", 0.0);
    rc.train.adamw.grad_clip = pf.get_double("train", "grad_clip", 1.0);
    rc.train.ema_decay = pf.get_double("train", "ema_decay", 0.999);
    rc.train.cond_dropout = pf.get_double("train", "cond_dropout", 0.1);
    rc.train.checkpoint_every = pf.get_int("train", "checkpoint_every", 2000);
    rc.train.seed = static_cast<uint64_t>(pf.get_int("train", "seed", 7));
    rc.model.init_seed = rc.train.seed;

    // [data]
    rc.train.corpus.seed = static_cast<uint64_t>(pf.get_int("data", "corpus_seed", 1234));
    rc.train.corpus.size = pf.get_int("data", "corpus_size", 4096);
    rc.train.corpus.image_size = static_cast<int>(pf.get_int("data", "image_size", 32));
    rc.train.corpus.max_shapes = static_cast<int>(pf.get_int("data", "max_shapes", 8));
    rc.train.corpus.single_fraction = pf.get_double("data", "single_fraction", 0.4);
    if (rc.train.corpus.max_shapes < 1 || rc.train.corpus.max_shapes > 8)
        throw ConfigError(filename + ": max_shapes must lie in [1, 8]");
    if (rc.train.corpus.image_size < 30)
        throw ConfigError(filename + ": image_size must be at least 30 (shape placement grid)");
    if (rc.train.corpus.image_size % bb.patch_size != 0)
        throw ConfigError(filename + ": image_size must be divisible by patch_size");

    rc.resolved_text = resolve_config_text(rc);
    rc.config_hash = fnv1a(rc.resolved_text);
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str(), path);
}

std::string resolve_config_text(const RunConfig& rc) {
    std::ostringstream o;
    const LIDiTConfig& bb = rc.model.backbone;
    o << "[model]\n";
    o << "depth = " << bb.depth << "\n";
    o << "d_model = " << bb.d_model << "\n";
    o << "n_heads = " << bb.n_heads << "\n";
    o << "patch_size = " << bb.patch_size << "\n";
    o << "in_channels = " << bb.in_channels << "\n";
    o << "ffn_expansion = " << bb.ffn_expansion << "\n";
    o << "qk_norm = " << (bb.qk_norm ? "on" : "off") << "\n";
    o << "qk_gamma_shared = " << (bb.shared_qk_gamma ? "on" : "off") << "\n";

    o << "\n[encoders]\n";
    o << "count = " << rc.model.encoders.size() << "\n";
    o << "instruction_text = " << rc.model.pipeline.instruction_text << "\n";
    for (size_t i = 0; i < rc.model.encoders.size(); ++i) {
        const EncoderSpec& e = rc.model.encoders[i];
        std::string p = "enc" + std::to_string(i + 1) + ".";
        o << p << "kind = " << (e.kind == EncoderSpec::Kind::Toy ? "toy" : "fixture") << "\n";
        if (e.kind == EncoderSpec::Kind::FixtureDir) o << p << "fixture_dir = " << e.fixture_dir << "\n";
        o << p << "seed = " << e.toy.seed << "\n";
        o << p << "d_enc = " << e.toy.d_enc << "\n";
        o << p << "n_layers = " << e.toy.n_layers << "\n";
        o << p << "n_heads = " << e.toy.n_heads << "\n";
        o << p << "max_len = " << e.toy.max_len << "\n";
        o << p << "id = " << e.toy.id << "\n";
    }

    const PipelineConfig& pl = rc.model.pipeline;
    o << "\n[refiners]\n";
    o << "token_heads = " << pl.refiner_heads << "\n";
    o << "collab_blocks = " << pl.collab_blocks << "\n";
    o << "collab_heads = " << pl.collab_heads << "\n";
    o << "shared_gate_head = " << (pl.refiner_shared_gate_head ? "on" : "off") << "\n";

    o << "\n[diffusion]\n";
    o << "T = " << rc.train.T << "\n";
    o << "beta_start = " << fmt_double(rc.train.beta_start) << "\n";
    o << "beta_end = " << fmt_double(rc.train.beta_end) << "\n";
    o << "sigma_mode = " << (rc.train.sigma_mode == SigmaMode::Beta ? "beta" : "alpha_bar_ratio") << "\n";
    o << "sample_steps = " << rc.sample_steps << "\n";
    o << "cfg_scale = " << fmt_double(rc.cfg_scale) << "\n";

    o << "\n[train]\n";
    o << "steps = " << rc.train.steps << "\n";
    o << "batch_size = " << rc.train.batch_size << "\n";
    o << "lr = " << fmt_double(rc.train.adamw.lr) << "\n";
    o << "weight_decay = " << fmt_double(rc.train.adamw.weight_decay) << "\n";
    o << "grad_clip = " << fmt_double(rc.train.adamw.grad_clip) << "\n";
    o << "ema_decay = " << fmt_double(rc.train.ema_decay) << "\n";
    o << "cond_dropout = " << fmt_double(rc.train.cond_dropout) << "\n";
    o << "checkpoint_every = " << rc.train.checkpoint_every << "\n";
    o << "seed = " << rc.train.seed << "\n";

    o << "\n[data]\n";
    o << "corpus_seed = " << rc.train.corpus.seed << "\n";
    o << "corpus_size = " << rc.train.corpus.size << "\n";
    o << "image_size = " << rc.train.corpus.image_size << "\n";
    o << "max_shapes = " << rc.train.corpus.max_shapes << "\n";
    o << "single_fraction = " << fmt_double(rc.train.corpus.single_fraction) << "\n";

    const AblationSwitches& ab = rc.ablation;
    o << "\n[ablation]\n";
    o << "preset = " << ab.preset << "\n";
    // named presets fix their switches, so the resolved values appear as
    // comments; 'custom' emits them as real keys and round-trips directly
    std::string pre = ab.preset == "custom" ? "" : "# ";
    o << pre << "instruction = " << (ab.instruction ? "on" : "off") << "\n";
    o << pre << "token_refiner = " << (ab.token_refiner ? "on" : "off") << "\n";
    o << pre << "refiner_full_attention = " << (ab.refiner_full_attention ? "on" : "off") << "\n";
    o << pre << "gating = " << (ab.gating ? "on" : "off") << "\n";
    o << pre << "refiner_blocks = " << ab.refiner_blocks << "\n";
    o << pre << "fusion = " << fusion_name(ab.fusion) << "\n";
    o << pre << "single_encoder = " << ab.single_encoder << "\n";
    return o.str();
}

std::string default_config_text() {
    RunConfig rc = parse_run_config("[ablation]\npreset = default\n", "<default>");
    return rc.resolved_text;
}

FixtureSpec parse_fixture_spec(const std::string& text, const std::string& filename) {
    ParsedFile pf = parse_lines(text, filename);
    for (const auto& [section, keys] : pf.sections) {
        if (section == "prompts") continue;
        if (section != "encoder")
            throw ConfigError(filename + ": unknown section [" + section + "] (expected [encoder], [prompts])");
        static const std::set<std::string> fields = {"seed",    "d_enc",        "n_layers",
                                                     "n_heads", "max_len",      "id",
                                                     "instruction", "instruction_text"};
        for (const auto& [key, entry] : keys)
            if (!fields.count(key)) pf.fail(entry.line, "unknown key '" + key + "' in [encoder]");
    }
    FixtureSpec spec;
    spec.encoder.seed = static_cast<uint64_t>(pf.get_int("encoder", "seed", 101));
    spec.encoder.d_enc = pf.get_int("encoder", "d_enc", 128);
    spec.encoder.n_layers = pf.get_int("encoder", "n_layers", 4);
    spec.encoder.n_heads = pf.get_int("encoder", "n_heads", 4);
    spec.encoder.max_len = pf.get_int("encoder", "max_len", 160);
    spec.encoder.id = pf.get_string("encoder", "id", "enc1");
    spec.instruction = pf.get_bool("encoder", "instruction", true);
    spec.instruction_text = pf.get_string("encoder", "instruction_text", kDefaultInstruction);
    auto prompts = pf.sections.find("prompts");
    if (prompts == pf.sections.end() || prompts->second.empty())
        throw ConfigError(filename + ": section [prompts] must list at least one prompt");
    for (const auto& [key, entry] : prompts->second) spec.prompts.push_back(entry.value);
    return spec;
}

FixtureSpec load_fixture_spec(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open fixture spec: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_fixture_spec(ss.str(), path);
}

}  // namespace lidit
