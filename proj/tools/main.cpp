#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lidit/blas.hpp"
#include "lidit/codec.hpp"
#include "lidit/config.hpp"
#include "lidit/fixture_spec.hpp"
#include "lidit/model.hpp"
#include "lidit/pipeline.hpp"
#include "lidit/posbias.hpp"
#include "lidit/trainer.hpp"

namespace fs = std::filesystem;
using namespace lidit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

std::string timestamp_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", std::localtime(&tt));
    return buf;
}

std::string hash_hex(uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f << text;
    if (!f) throw IoError("short write: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string metrics_line(const StepMetrics& m) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["grad_norm"] = m.grad_norm;
    j["lr"] = m.lr;
    j["wall_ms"] = m.wall_ms;
    return j.dump();
}

// loads the EMA weights from a checkpoint (or raw ones on request)
void load_model_weights(GenerativeModel<float>& model, const std::string& ckpt_path, bool raw) {
    std::vector<TensorRecord> records = read_checkpoint(ckpt_path);
    load_store(records, model.params, raw ? "" : "ema.");
}

struct TrainCli {
    std::string config_path;
    std::string run_dir;
    std::string resume_dir;
};

int64_t latest_checkpoint_step(const fs::path& dir) {
    int64_t best = -1;
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::string name = entry.path().filename().string();
        long long step;
        if (std::sscanf(name.c_str(), "ckpt_%lld.lidt", &step) == 1)
            best = std::max<int64_t>(best, step);
    }
    return best;
}

int cmd_train(const TrainCli& args) {
    RunConfig rc = load_run_config(args.config_path);
    bool resuming = !args.resume_dir.empty();
    fs::path dir;
    if (resuming) {
        dir = args.resume_dir;
        if (!fs::exists(dir)) throw IoError("resume directory does not exist: " + dir.string());
    } else if (!args.run_dir.empty()) {
        dir = args.run_dir;
    } else {
        dir = fs::path("runs") / (hash_hex(rc.config_hash).substr(0, 12) + "-" + timestamp_now());
    }
    fs::create_directories(dir);

    fs::path resolved = dir / "resolved.cfg";
    if (fs::exists(resolved)) {
        if (read_text(resolved) != rc.resolved_text)
            throw ConfigError("run directory " + dir.string() +
                              " was created from a different configuration");
    } else {
        write_text(resolved, rc.resolved_text);
    }

    fs::path metrics_path = dir / "metrics.jsonl";
    if (!resuming && fs::exists(metrics_path) && fs::file_size(metrics_path) > 0)
        throw IoError("refusing to overwrite existing run artifacts in " + dir.string() +
                      " (use --resume)");

    GenerativeModel<float> model(rc.model);
    Trainer<float> trainer(model, rc.train);

    if (resuming) {
        int64_t step = latest_checkpoint_step(dir);
        if (step < 0) throw IoError("no checkpoint found in " + dir.string());
        char name[64];
        std::snprintf(name, sizeof(name), "ckpt_%08lld.lidt", static_cast<long long>(step));
        trainer.load((dir / name).string());
        // keep only metric lines the checkpoint already covers
        if (fs::exists(metrics_path)) {
            std::istringstream in(read_text(metrics_path));
            std::string line, kept;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                auto j = nlohmann::json::parse(line);
                if (j["step"].get<int64_t>() <= step) kept += line + "\n";
            }
            write_text(metrics_path, kept);
        }
        std::printf("resumed from step %lld\n", static_cast<long long>(step));
    }

    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics stream: " + metrics_path.string());

    auto checkpoint = [&](int64_t step) {
        char name[64];
        std::snprintf(name, sizeof(name), "ckpt_%08lld.lidt", static_cast<long long>(step));
        fs::path path = dir / name;
        if (fs::exists(path)) return;  // completed artifacts are never rewritten
        trainer.save(path.string());
    };

    int64_t total = rc.train.steps;
    for (int64_t s = trainer.current_step(); s < total;) {
        StepMetrics m = trainer.step();
        s = m.step;
        metrics << metrics_line(m) << "\n";
        metrics.flush();
        if (rc.train.checkpoint_every > 0 && s % rc.train.checkpoint_every == 0) checkpoint(s);
        if (s % 50 == 0 || s == total)
            std::printf("step %lld/%lld loss %.5f grad %.4f (%.0f ms)\n", static_cast<long long>(s),
                        static_cast<long long>(total), m.loss, m.grad_norm, m.wall_ms);
    }
    checkpoint(total);
    std::printf("run directory: %s\n", dir.string().c_str());
    return 0;
}

struct SampleCli {
    std::string config_path, ckpt, prompt, out;
    uint64_t seed = 0;
    int64_t steps = 0;
    double cfg_scale = -1.0;
    bool raw_weights = false;
};

int cmd_sample(const SampleCli& args) {
    RunConfig rc = load_run_config(args.config_path);
    GenerativeModel<float> model(rc.model);
    load_model_weights(model, args.ckpt, args.raw_weights);

    NoiseSchedule sched = NoiseSchedule::linear(rc.train.T, rc.train.beta_start, rc.train.beta_end);
    SampleParams params;
    params.steps = args.steps > 0 ? args.steps : rc.sample_steps;
    params.cfg_scale = args.cfg_scale >= 0 ? args.cfg_scale : rc.cfg_scale;
    params.sigma_mode = rc.train.sigma_mode;

    IdentityCodec codec;
    int64_t hw = codec.latent_extent(rc.train.corpus.image_size);
    Shape shape = {1, codec.channels(), hw, hw};
    Tensor<float> latent =
        sample_latents(model, {args.prompt}, shape, sched, params, Rng(Rng::fold(args.seed, 0x5a11)));
    Tensor<float> one = reshape(latent, {codec.channels(), hw, hw});
    write_ppm(codec.decode_latent(one), args.out);
    std::printf("wrote %s\n", args.out.c_str());
    return 0;
}

struct PosbiasCli {
    std::string config_path, ckpt, out_dir;
    int64_t n = 100;
    uint64_t seed = 0;
    int64_t images_per_prompt = 4;
    int max_segments = 8;
    int min_segments = 0;
    int64_t steps = 0;
    double cfg_scale = -1.0;
    bool raw_weights = false;
};

int cmd_posbias(const PosbiasCli& args) {
    RunConfig rc = load_run_config(args.config_path);
    GenerativeModel<float> model(rc.model);
    load_model_weights(model, args.ckpt, args.raw_weights);

    NoiseSchedule sched = NoiseSchedule::linear(rc.train.T, rc.train.beta_start, rc.train.beta_end);
    SampleParams params;
    params.steps = args.steps > 0 ? args.steps : rc.sample_steps;
    params.cfg_scale = args.cfg_scale >= 0 ? args.cfg_scale : rc.cfg_scale;
    params.sigma_mode = rc.train.sigma_mode;

    IdentityCodec codec;
    int64_t hw = codec.latent_extent(rc.train.corpus.image_size);

    auto prompts = generate_prompts(BenchVocab::standard(), args.n, args.max_segments, args.seed,
                                    args.min_segments);
    ImageSampler sampler = [&](const CompositionPrompt& p, int64_t k) {
        std::vector<std::string> texts(static_cast<size_t>(k), p.text);
        Shape shape = {k, codec.channels(), hw, hw};
        Tensor<float> latents = sample_latents(model, texts, shape, sched, params, Rng(p.seed));
        std::vector<Image> images;
        int64_t per = codec.channels() * hw * hw;
        for (int64_t i = 0; i < k; ++i) {
            std::vector<float> chw(latents.data() + i * per, latents.data() + (i + 1) * per);
            images.push_back(codec.decode_latent(
                Tensor<float>::from_data({codec.channels(), hw, hw}, std::move(chw))));
        }
        return images;
    };

    OracleScorer scorer;
    BenchReport report = run_bench(prompts, args.images_per_prompt, sampler, scorer);

    fs::create_directories(args.out_dir);
    std::string desc = "preset=" + rc.ablation.preset + " config=" + hash_hex(rc.config_hash) +
                       " seed=" + std::to_string(args.seed);
    write_text(fs::path(args.out_dir) / "report.json", bench_report_json(report, desc));
    write_text(fs::path(args.out_dir) / "curve.csv", bench_report_csv(report));
    write_ppm(bench_report_chart(report), (fs::path(args.out_dir) / "curve.ppm").string());

    for (size_t p = 0; p < report.per_position_mean.size(); ++p)
        std::printf("position %zu: mean %.4f over %lld prompts\n", p + 1, report.per_position_mean[p],
                    static_cast<long long>(report.counts[p]));
    if (report.exclusions)
        std::printf("excluded prompts: %lld\n", static_cast<long long>(report.exclusions));
    std::printf("wrote %s\n", (fs::path(args.out_dir) / "report.json").string().c_str());
    return 0;
}

struct FixturesCli {
    std::string spec_path, out_dir;
};

int cmd_fixtures(const FixturesCli& args) {
    FixtureSpec spec = load_fixture_spec(args.spec_path);
    ToyCausalLM<float> lm(spec.encoder);
    fs::create_directories(args.out_dir);
    nlohmann::ordered_json index;
    for (const std::string& prompt : spec.prompts) {
        TokenSequence seq =
            build_input(spec.instruction ? spec.instruction_text : "", prompt, Vocab::standard());
        PromptEncoding<float> enc = lm.encode(seq);
        std::string name = fixture_file_name(seq);
        save_fixture(to_fixture(enc), (fs::path(args.out_dir) / name).string());
        index[prompt] = name;
    }
    write_text(fs::path(args.out_dir) / "index.json", index.dump(2) + "\n");
    std::printf("wrote %zu fixtures to %s\n", spec.prompts.size(), args.out_dir.c_str());
    return 0;
}

struct EncodeCli {
    std::string prompt, out;
    uint64_t seed = 101;
    int64_t d_enc = 128, n_layers = 4, n_heads = 4, max_len = 160;
    bool instruction = true;
    std::string instruction_text = kDefaultInstruction;
};

int cmd_encode(const EncodeCli& args) {
    ToyLMConfig cfg;
    cfg.seed = args.seed;
    cfg.d_enc = args.d_enc;
    cfg.n_layers = args.n_layers;
    cfg.n_heads = args.n_heads;
    cfg.max_len = args.max_len;
    cfg.id = "cli";
    ToyCausalLM<float> lm(cfg);
    TokenSequence seq =
        build_input(args.instruction ? args.instruction_text : "", args.prompt, Vocab::standard());
    save_fixture(to_fixture(lm.encode(seq)), args.out);
    std::printf("wrote %s\n", args.out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("LIDIT_THREADS")) blas::set_threads(std::atoi(threads));

    CLI::App app{"LLM-infused diffusion transformer: training, sampling, and the positional-bias benchmark"};
    app.require_subcommand(1);

    TrainCli train_args;
    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", train_args.config_path, "run configuration file")->required();
    train->add_option("--run-dir", train_args.run_dir, "output directory (default: runs/<hash>-<time>)");
    train->add_option("--resume", train_args.resume_dir, "existing run directory to continue");

    SampleCli sample_args;
    auto* sample = app.add_subcommand("sample", "generate one image from a prompt");
    sample->add_option("--config", sample_args.config_path)->required();
    sample->add_option("--ckpt", sample_args.ckpt)->required();
    sample->add_option("--prompt", sample_args.prompt)->required();
    sample->add_option("--seed", sample_args.seed)->required();
    sample->add_option("--steps", sample_args.steps, "sampler steps (default from config)");
    sample->add_option("--cfg", sample_args.cfg_scale, "guidance scale (default from config)");
    sample->add_option("--out", sample_args.out, "output image (ppm)")->required();
    sample->add_flag("--raw-weights", sample_args.raw_weights, "use raw instead of EMA weights");

    PosbiasCli pos_args;
    auto* pos = app.add_subcommand("posbias", "run the positional-bias benchmark");
    pos->add_option("--config", pos_args.config_path)->required();
    pos->add_option("--ckpt", pos_args.ckpt)->required();
    pos->add_option("--n", pos_args.n, "number of prompts");
    pos->add_option("--seed", pos_args.seed)->required();
    pos->add_option("--out", pos_args.out_dir, "output directory")->required();
    pos->add_option("--images-per-prompt", pos_args.images_per_prompt);
    pos->add_option("--max-segments", pos_args.max_segments);
    pos->add_option("--min-segments", pos_args.min_segments);
    pos->add_option("--steps", pos_args.steps, "sampler steps (default from config)");
    pos->add_option("--cfg", pos_args.cfg_scale, "guidance scale (default from config)");
    pos->add_flag("--raw-weights", pos_args.raw_weights);

    FixturesCli fix_args;
    auto* fix = app.add_subcommand("fixtures", "precompute embedding fixtures for a prompt list");
    fix->add_option("--spec", fix_args.spec_path, "fixture spec file")->required();
    fix->add_option("--out", fix_args.out_dir, "output directory")->required();

    EncodeCli enc_args;
    auto* enc = app.add_subcommand("encode", "encode one prompt to an embedding fixture");
    enc->add_option("--prompt", enc_args.prompt)->required();
    enc->add_option("--out", enc_args.out)->required();
    enc->add_option("--seed", enc_args.seed);
    enc->add_option("--d-enc", enc_args.d_enc);
    enc->add_option("--layers", enc_args.n_layers);
    enc->add_option("--heads", enc_args.n_heads);
    enc->add_option("--max-len", enc_args.max_len);
    enc->add_flag("--no-instruction{false}", enc_args.instruction, "omit the instruction prefix");
    enc->add_option("--instruction-text", enc_args.instruction_text);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(train_args);
        if (*sample) return cmd_sample(sample_args);
        if (*pos) return cmd_posbias(pos_args);
        if (*fix) return cmd_fixtures(fix_args);
        if (*enc) return cmd_encode(enc_args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const FixtureError& e) {
        std::cerr << "fixture error: " << e.what() << "\n";
        return kExitIo;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
