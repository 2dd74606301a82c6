// Command-line front end. Each subcommand is one experiment stage; `run`
// executes all of them in-process.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "freqattack/harness.hpp"

namespace freqattack::cli {

namespace fs = std::filesystem;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

inline void add_common(CLI::App* sub, CommonOptions& o, bool out_required = true) {
    sub->add_option("--config", o.config, "experiment config JSON (defaults when omitted)");
    sub->add_option("--seed", o.seed, "override the master seed");
    auto* out = sub->add_option("--out", o.out, "output directory");
    if (out_required) out->required();
}

inline ExperimentConfig resolve_config(const CommonOptions& o) {
    ExperimentConfig cfg;
    if (o.config.empty()) {
        cfg = ExperimentConfig::defaults();
    } else {
        if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config);
        cfg = load_experiment_config(o.config);
    }
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate();
    return cfg;
}

inline void write_stage_config(const ExperimentConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream os(dir / "config.json");
    if (!os) throw IoError("cannot write " + (dir / "config.json").string());
    os << to_json(cfg).dump(2) << '\n';
}

/// Stages must see the config their inputs were produced with.
inline void require_same_config(const ExperimentConfig& cfg, const fs::path& dir) {
    std::ifstream is(dir / "config.json");
    if (!is) throw IoError("missing " + (dir / "config.json").string() + "; was this directory produced by freqattack?");
    nlohmann::json j;
    is >> j;
    if (fnv1a_hex(j.dump()) != config_hash(cfg)) {
        throw ConfigError("config (including --seed) differs from the one used to produce " + dir.string());
    }
}

inline GeneratedData load_generated(const ExperimentConfig& cfg, const fs::path& dir) {
    require_same_config(cfg, dir);
    return {load_dataset(dir / "train"), load_dataset(dir / "eval")};
}

inline std::vector<TrainedModel> load_models(const ExperimentConfig& cfg, const fs::path& dir) {
    require_same_config(cfg, dir);
    return load_roster(dir);
}

inline void write_report(nlohmann::json report, const fs::path& dir) {
    fs::create_directories(dir);
    stamp_report(report);
    std::ofstream(dir / "report.json") << report.dump(2) << '\n';
    std::ofstream(dir / "report.txt") << format_report_text(report);
}

inline std::vector<fs::path> png_inputs(const fs::path& input) {
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input)) {
            if (e.path().extension() == ".png") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else {
        if (!fs::exists(input)) throw IoError("input not found: " + input.string());
        files.push_back(input);
    }
    return files;
}

/// Attacks standalone PNGs against one checkpoint. Images the model does not
/// classify as fake are reported and skipped.
inline void attack_files(const ExperimentConfig& cfg, const std::string& attack_name, const fs::path& input,
                         const fs::path& model_path, const fs::path& out, std::ostream& log) {
    const AttackSpec* spec = nullptr;
    for (const auto& a : cfg.attacks) {
        if (a.name == attack_name) spec = &a;
    }
    if (!spec) throw ConfigError("attack '" + attack_name + "' is not in the config's attack roster");
    const std::shared_ptr<const DifferentiableModel> model = load_checkpoint(model_path.string());
    fs::create_directories(out);
    const auto files = png_inputs(input);
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Image img = read_png(files[i].string());
        const std::string stem = files[i].stem().string();
        nlohmann::json j{{"input", files[i].string()}, {"attack", spec->name}, {"model", model_path.string()}};
        if (model->predict(img) != Label::fake) {
            j["skipped"] = "not classified fake";
            log << stem << ": skipped, not classified fake\n";
        } else {
            AttackConfig c = spec->cfg;
            c.seed = derive_seed(derive_seed(cfg.seed, kAttackStream), i);
            const AttackResult r = run_attack(spec->kind, *model, img, Label::fake, c);
            write_png((out / (stem + "_adv.png")).string(), r.adv);
            save_tensor_bin(r.adv, out / (stem + "_adv.bin"));
            const QualityReport q = quality(img, r.adv);
            j.update({{"success", r.success},
                      {"iterations_used", r.iterations_used},
                      {"grad_calls", r.grad_calls},
                      {"final_loss", json_real(r.final_loss)},
                      {"quality", to_json(q)},
                      {"adv_png", stem + "_adv.png"},
                      {"adv_tensor", stem + "_adv.bin"}});
            log << stem << ": " << (r.success ? "flipped" : "not flipped") << " after " << r.iterations_used
                << " iterations, PSNR " << q.psnr << " dB\n";
        }
        std::ofstream(out / (stem + ".json")) << j.dump(2) << '\n';
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"freqattack: frequency-domain adversarial attacks on forgery detectors"};
    app.require_subcommand(1, 1);

    CommonOptions gen_o, train_o, attack_o, eval_o, report_o, run_o;
    std::string data_dir, models_dir, attacks_dir, input, model_path, attack_name = "hybrid";
    std::vector<std::string> report_inputs;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/eval datasets as PNG + labels.csv");
    add_common(gen, gen_o);

    auto* trn = app.add_subcommand("train", "train the model roster and write checkpoints");
    add_common(trn, train_o);
    trn->add_option("--data", data_dir, "directory written by gen-data")->required();

    auto* atk = app.add_subcommand("attack", "run the attack roster, or one attack on standalone PNGs");
    add_common(atk, attack_o);
    atk->add_option("--data", data_dir, "directory written by gen-data");
    atk->add_option("--models", models_dir, "directory written by train");
    atk->add_option("--input", input, "PNG file or directory of PNGs to attack");
    atk->add_option("--model", model_path, "checkpoint used with --input");
    atk->add_option("--attack", attack_name, "attack name from the roster, used with --input");

    auto* evl = app.add_subcommand("evaluate", "compute transfer matrices and quality tables");
    add_common(evl, eval_o);
    evl->add_option("--data", data_dir, "directory written by gen-data")->required();
    evl->add_option("--models", models_dir, "directory written by train")->required();
    evl->add_option("--attacks", attacks_dir, "directory written by attack")->required();

    auto* rep = app.add_subcommand("report", "render report JSON files as text tables");
    add_common(rep, report_o, false);
    rep->add_option("inputs", report_inputs, "report.json files")->required();

    auto* all = app.add_subcommand("run", "run every stage in-process and write the report");
    add_common(all, run_o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n' << app.help();
        return 2;
    }

    try {
        if (*gen) {
            const auto cfg = resolve_config(gen_o);
            const auto data = generate_dataset(cfg);
            save_dataset(data.train, fs::path(gen_o.out) / "train");
            save_dataset(data.eval, fs::path(gen_o.out) / "eval");
            write_stage_config(cfg, gen_o.out);
            out << "wrote " << data.train.size() << " train and " << data.eval.size() << " eval images to "
                << gen_o.out << '\n';
        } else if (*trn) {
            const auto cfg = resolve_config(train_o);
            const auto data = load_generated(cfg, data_dir);
            const auto roster = train_roster(cfg, data);
            save_roster(roster, train_o.out);
            write_stage_config(cfg, train_o.out);
            for (const auto& m : roster) {
                out << m.name << ": train accuracy " << m.report.train_accuracy << ", holdout accuracy "
                    << m.report.holdout_accuracy << '\n';
            }
        } else if (*atk) {
            const auto cfg = resolve_config(attack_o);
            if (!input.empty()) {
                if (model_path.empty()) throw ConfigError("--input requires --model");
                attack_files(cfg, attack_name, input, model_path, attack_o.out, out);
            } else {
                if (data_dir.empty() || models_dir.empty()) {
                    err << "error: attack needs either --data and --models, or --input and --model\n"
                        << atk->help();
                    return 2;
                }
                const auto data = load_generated(cfg, data_dir);
                const auto roster = load_models(cfg, models_dir);
                const auto archive = run_attacks(cfg, data.eval, roster);
                save_archive(archive, attack_o.out);
                write_stage_config(cfg, attack_o.out);
                out << "wrote " << archive.records.size() << " adversarial examples";
                if (!archive.failures.empty()) out << " (" << archive.failures.size() << " failed)";
                out << " to " << attack_o.out << '\n';
            }
        } else if (*evl) {
            const auto cfg = resolve_config(eval_o);
            const auto data = load_generated(cfg, data_dir);
            const auto roster = load_models(cfg, models_dir);
            require_same_config(cfg, attacks_dir);
            const auto archive = load_archive(attacks_dir);
            write_report(build_report(cfg, data, roster, archive), eval_o.out);
            if (cfg.dump_examples > 0) dump_examples(cfg, data.eval, archive, eval_o.out);
            out << "wrote " << (fs::path(eval_o.out) / "report.json").string() << '\n';
        } else if (*rep) {
            std::ostringstream text;
            for (const auto& path : report_inputs) {
                std::ifstream is(path);
                if (!is) throw IoError("cannot open report: " + path);
                nlohmann::json j;
                try {
                    is >> j;
                } catch (const nlohmann::json::exception& e) {
                    throw FormatError("report " + path + " is not valid JSON: " + e.what());
                }
                text << format_report_text(j) << '\n';
            }
            out << text.str();
            if (!report_o.out.empty()) {
                fs::create_directories(report_o.out);
                std::ofstream(fs::path(report_o.out) / "report.txt") << text.str();
            }
        } else if (*all) {
            auto cfg = resolve_config(run_o);
            cfg.output_dir = run_o.out;
            const auto res = run_experiment(cfg);
            write_stage_config(cfg, run_o.out);
            write_report(res.report, run_o.out);
            out << "wrote " << (fs::path(run_o.out) / "report.json").string() << '\n';
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

} // namespace freqattack::cli
