// Command-line entry points: synthetic dataset generation, training,
// evaluation, and the finite-difference gradient check suite.
//
// Exit codes: 0 success, 1 runtime/numeric failure, 2 usage/config error.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "maeclip/eval.hpp"
#include "maeclip/gradcheck.hpp"
#include "maeclip/training.hpp"

namespace fs = std::filesystem;
using namespace maeclip;

namespace {

constexpr const char* kVersion = "maeclip 0.1.0";

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

SynthSpec parse_synth_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open spec file " + path);
    SynthSpec spec;
    std::string line;
    int line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("spec line " + std::to_string(line_no) + " is not key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "shapes") spec.shapes = split_commas(value);
        else if (key == "colors") spec.colors = split_commas(value);
        else if (key == "image_size") spec.image_size = std::stoi(value);
        else if (key == "caption_template") spec.caption_template = value;
        else throw ConfigError("unknown spec key '" + key + "'");
    }
    if (spec.shapes.empty() || spec.colors.empty()) throw ConfigError("spec needs shapes and colors");
    return spec;
}

// ---------------------------------------------------------------------------

int cmd_synth(uint64_t seed, int n, const std::string& out_path, const std::string& spec_path, int planted_dups) {
    if (n < 1) throw ConfigError("--n must be >= 1");
    if (planted_dups < 0 || planted_dups >= n) throw ConfigError("--planted-dups must lie in [0, n)");
    SynthSpec spec = spec_path.empty() ? SynthSpec{} : parse_synth_spec(spec_path);

    const int unique = n - planted_dups;
    auto records = make_synthetic_pairs(seed, unique, spec);
    Vocab vocab = Vocab::byte_level();
    for (int i = 0; i < planted_dups; ++i) {
        PairRecord dup = records[i % unique];
        dup.caption_bytes = "copy " + std::to_string(i) + " of: " + dup.caption_bytes;
        dup.tokens = tokenize(dup.caption_bytes, vocab);
        records.push_back(dup);
    }
    write_dataset(out_path, records);
    std::cout << "records\t" << records.size() << "\n";
    std::cout << "digest\t" << file_digest_hex(out_path) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out_dir,
              const std::string& mode_override, const std::string& resume_path) {
    auto records = read_dataset(data_path);

    std::optional<Trainer> trainer;
    if (!resume_path.empty()) {
        trainer.emplace(Trainer::load_checkpoint_file(resume_path, std::move(records)));
        if (!mode_override.empty() && parse_mode(mode_override) != trainer->config().train.mode)
            throw ConfigError("--mode cannot change when resuming from a checkpoint");
    } else {
        if (config_path.empty()) throw ConfigError("--config is required unless resuming");
        RunConfig cfg = load_config_file(config_path);
        if (!mode_override.empty()) cfg.train.mode = parse_mode(mode_override);
        cfg.validate();
        trainer.emplace(cfg, std::move(records));
    }

    fs::create_directories(out_dir);
    const fs::path manifest_path = fs::path(out_dir) / "manifest.cfg";
    {
        std::ofstream manifest(manifest_path);
        manifest << "# " << kVersion << "\n";
        manifest << "# started = " << timestamp_utc() << "\n";
        manifest << "# data = " << data_path << "\n";
        manifest << "# out = " << out_dir << "\n";
        manifest << serialize_config(trainer->config());
    }

    const fs::path log_path = fs::path(out_dir) / "loss.tsv";
    std::ofstream log(log_path);
    log << loss_log_header() << "\n";

    const int64_t total = trainer->config().train.steps;
    const int64_t report_every = std::max<int64_t>(1, total / 10);
    while (!trainer->done()) {
        const int64_t step = trainer->step_count();
        const double lr = trainer->current_lr();
        LossBreakdown b = trainer->step();
        log << loss_log_line(step, lr, b) << "\n";
        if (step % report_every == 0 || step + 1 == total)
            std::cout << "step " << step << "/" << total << " total=" << b.total << " l_c=" << b.l_c << "\n";
    }
    log.close();

    const fs::path ckpt_path = fs::path(out_dir) / "final.ckpt";
    trainer->save_checkpoint(ckpt_path.string());
    {
        std::ofstream manifest(manifest_path, std::ios::app);
        manifest << "# finished = " << timestamp_utc() << "\n";
    }
    std::cout << "checkpoint\t" << ckpt_path.string() << "\n";
    std::cout << "digest\t" << file_digest_hex(ckpt_path.string()) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

std::vector<Image> resized_images(const std::vector<PairRecord>& records, int size) {
    std::vector<Image> out;
    for (const auto& r : records) out.push_back(center_resize(r.image, size));
    return out;
}

// Ground-truth segmentation map for a synthetic record: pixels that differ
// from the (uniform) background take the caption color's 1-based label.
std::vector<int> synthetic_gt_map(const Image& img, int color_label) {
    std::vector<int> gt(static_cast<size_t>(img.height) * img.width, 0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            bool background = true;
            for (int c = 0; c < img.channels && background; ++c)
                background = img.at(y, x, c) == img.at(0, 0, c);
            if (!background) gt[static_cast<size_t>(y) * img.width + x] = color_label;
        }
    return gt;
}

int cmd_eval(const std::string& ckpt_path, const std::string& task, const std::string& data_path,
             const std::string& prompts_path, const std::string& classes_csv, const std::string& out_path,
             int vqa_steps, const std::string& question) {
    const bool needs_prompts = task == "zeroshot" || task == "segment";
    if (needs_prompts && prompts_path.empty())
        throw ConfigError("--prompts is required for task '" + task + "'");

    auto loaded = load_model_from_checkpoint(ckpt_path);
    const auto& mcfg = loaded.config.model;
    auto records = read_dataset(data_path);
    if (records.empty()) throw ConfigError("dataset is empty");
    Vocab vocab = Vocab::byte_level();

    EvalReport report;
    report.checkpoint_digest = file_digest_hex(ckpt_path);
    {
        const std::string cfg_text = serialize_config(loaded.config);
        report.config_digest = hex_digest(sha256_bytes(cfg_text.data(), cfg_text.size()));
    }

    SynthSpec defaults;
    if (task == "zeroshot") {
        const auto classes = classes_csv.empty() ? defaults.shapes : split_commas(classes_csv);
        auto templates = load_prompt_templates(prompts_path);
        PromptSet prompts = PromptSet::single_names(templates, classes);
        Tensor class_embs = class_embeddings(mcfg, loaded.params, prompts, vocab);
        std::vector<int> labels;
        for (const auto& r : records) labels.push_back(caption_label(r.caption_bytes, classes));
        auto result = zero_shot_classify(mcfg, loaded.params, resized_images(records, mcfg.image_size), class_embs,
                                         labels);
        report.add("zeroshot_accuracy", result.accuracy);
    } else if (task == "probe") {
        const auto classes = classes_csv.empty() ? defaults.shapes : split_commas(classes_csv);
        std::vector<int> labels;
        for (const auto& r : records) labels.push_back(caption_label(r.caption_bytes, classes));
        Tensor features = encoder_features(mcfg, loaded.params, resized_images(records, mcfg.image_size));
        report.add("probe_accuracy", linear_probe(features, labels, ProbeConfig{}));
    } else if (task == "retrieval") {
        std::vector<PairRecord> resized = records;
        for (auto& r : resized) r.image = center_resize(r.image, mcfg.image_size);
        auto pair = embed_records(mcfg, loaded.params, resized);
        std::vector<int> ks;
        for (int k : {1, 5, 10})
            if (k <= static_cast<int>(records.size())) ks.push_back(k);
        auto result = retrieval_eval(pair.x, pair.y, ks);
        for (int k : ks) {
            report.add("retrieval_r" + std::to_string(k) + "_i2t", result.recall[k].first);
            report.add("retrieval_r" + std::to_string(k) + "_t2i", result.recall[k].second);
        }
    } else if (task == "segment") {
        const auto classes = classes_csv.empty() ? defaults.colors : split_commas(classes_csv);
        auto templates = load_prompt_templates(prompts_path);
        PromptSet prompts = PromptSet::single_names(templates, classes);
        prompts.background_names = {"background"};
        double total_miou = 0.0;
        for (const auto& r : records) {
            Image img = center_resize(r.image, mcfg.image_size);
            const int color = caption_label(r.caption_bytes, classes);
            auto gt = synthetic_gt_map(img, color + 1);
            auto seg = zero_shot_segment(mcfg, loaded.params, img, prompts, vocab);
            total_miou += miou(seg.labels, gt, static_cast<int>(classes.size()) + 1);
        }
        report.add("segment_miou", total_miou / static_cast<double>(records.size()));
    } else if (task == "vqa") {
        const auto answers = classes_csv.empty() ? defaults.colors : split_commas(classes_csv);
        std::vector<VqaSample> samples;
        for (const auto& r : records) {
            samples.push_back({center_resize(r.image, mcfg.image_size), tokenize(question, vocab),
                               caption_label(r.caption_bytes, answers)});
        }
        VqaConfig vcfg;
        vcfg.steps = vqa_steps;
        auto head = vqa_finetune(mcfg, loaded.params, samples, static_cast<int>(answers.size()), vcfg, {});
        report.add("vqa_accuracy", head.accuracy);
    } else {
        throw ConfigError("unknown task '" + task + "' (expected zeroshot|probe|retrieval|segment|vqa)");
    }

    const std::string text = report.to_text();
    std::cout << text;
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw IoError("cannot open " + out_path + " for writing");
    out << text;
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_gradcheck(const std::string& scope, uint64_t seed, bool inject_fault) {
    std::vector<GradCheckCase> cases;
    if (scope == "ops") cases = gradcheck_ops_suite(seed);
    else if (scope == "blocks") cases = gradcheck_blocks_suite(seed);
    else if (scope == "model") cases = gradcheck_model_suite(seed);
    else throw ConfigError("unknown scope '" + scope + "' (expected ops|blocks|model)");
    if (inject_fault) cases.push_back(gradcheck_fault_injection_case(seed));

    auto summary = run_gradcheck_cases(cases);
    for (const auto& line : summary.lines) std::cout << line << "\n";
    std::cout << summary.passed << " passed, " << summary.failed << " failed\n";
    return summary.failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(kVersion) +
                 " - contrastive language-image pretraining with masked cross-modal reconstruction"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic image-text pair dataset");
    uint64_t synth_seed = 1;
    int synth_n = 0;
    int synth_dups = 0;
    std::string synth_out, synth_spec;
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--n", synth_n, "number of records")->required();
    synth->add_option("--out", synth_out, "output dataset path")->required();
    synth->add_option("--spec", synth_spec, "synthetic spec file (shapes, colors, image_size, caption_template)");
    synth->add_option("--planted-dups", synth_dups, "append this many records reusing earlier image bytes");

    // train
    auto* train = app.add_subcommand("train", "run the training loop");
    std::string train_config, train_data, train_out, train_mode, train_resume;
    train->add_option("--config", train_config, "config file (key = value lines)");
    train->add_option("--data", train_data, "dataset file")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--mode", train_mode, "mae_clip|clip|masked_clip (overrides config)");
    train->add_option("--resume", train_resume, "checkpoint to resume from");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_task, eval_data, eval_prompts, eval_classes, eval_out = "eval_report.txt";
    std::string eval_question = "what color is the shape?";
    int eval_vqa_steps = 200;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--task", eval_task, "zeroshot|probe|retrieval|segment|vqa")->required();
    eval->add_option("--data", eval_data, "dataset file")->required();
    eval->add_option("--prompts", eval_prompts, "prompt template file (one template per line)");
    eval->add_option("--classes", eval_classes, "comma-separated class names");
    eval->add_option("--out", eval_out, "report output path");
    eval->add_option("--vqa-steps", eval_vqa_steps, "finetuning steps for the vqa task");
    eval->add_option("--question", eval_question, "question text for the vqa task");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string gc_scope;
    uint64_t gc_seed = 1;
    bool gc_fault = false;
    gradcheck->add_option("--scope", gc_scope, "ops|blocks|model")->required();
    gradcheck->add_option("--seed", gc_seed, "suite seed");
    gradcheck->add_flag("--inject-fault", gc_fault, "add a deliberately corrupted gradient (must fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_seed, synth_n, synth_out, synth_spec, synth_dups);
        if (train->parsed()) return cmd_train(train_config, train_data, train_out, train_mode, train_resume);
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_task, eval_data, eval_prompts, eval_classes, eval_out, eval_vqa_steps,
                            eval_question);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_scope, gc_seed, gc_fault);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
