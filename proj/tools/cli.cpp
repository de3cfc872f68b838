#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <CLI11.hpp>

#include "precofact/dataio.hpp"
#include "precofact/ensemble.hpp"
#include "precofact/metrics.hpp"

namespace precofact::cli {

namespace fs = std::filesystem;

RunConfig parse_run_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig rc;
    for (const auto& [key, value] : j.items()) {
        if (key == "model") {
            rc.model = value.get<ModelConfig>();
            rc.text_width_given = value.contains("input_width_text");
            rc.image_width_given = value.contains("input_width_image");
        } else if (key == "train") {
            rc.train = value.get<TrainConfig>();
        } else if (key == "paths") {
            if (!value.is_object()) throw ConfigError("'paths' must be an object");
            for (const auto& [pkey, pvalue] : value.items()) {
                if (!pvalue.is_string()) throw ConfigError("bad value for 'paths." + pkey + "': expected a string");
                const fs::path p = pvalue.get<std::string>();
                if (pkey == "train_data") rc.train_data = p;
                else if (pkey == "val_data") rc.val_data = p;
                else if (pkey == "out_dir") rc.out_dir = p;
                else throw ConfigError("unknown key 'paths." + pkey + "'");
            }
        } else {
            throw ConfigError("unknown key '" + key + "'");
        }
    }
    rc.train.validate();
    return rc;
}

RunConfig read_run_config(const fs::path& path) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) throw NotFoundError("no such config file: " + path.string());
    std::ifstream in(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

int exit_code_for(const Error& e) {
    const auto& c = e.category();
    if (c == "data-not-found") return kExitMissingInput;
    if (c == "config") return kExitConfig;
    if (c == "flag") return kExitFlagContract;
    if (c == "non-finite") return kExitOther;
    return kExitDataContract;
}

std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PRECOFACT_THREADS"); env && *env) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (*end != '\0' || cap < 1) throw ConfigError("PRECOFACT_THREADS must be a positive integer");
        n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    }
    return n;
}

namespace {

std::vector<int> require_labels(const Dataset& ds, const fs::path& path) {
    if (!ds.header.labeled) throw InvalidInputError(path.string() + " is unlabeled; evaluation needs labels");
    std::vector<int> labels;
    labels.reserve(ds.samples.size());
    for (const auto& s : ds.samples) labels.push_back(*s.label);
    return labels;
}

void write_line(std::ostream& out, const nlohmann::json& j) { out << j.dump() << '\n'; }

void report(std::ostream& out, const EvalReport& r, bool json) {
    if (json)
        write_line(out, to_json(r));
    else
        print_report(out, r);
}

// ------------------------------------------------------------------ train

struct TrainArgs {
    std::optional<std::string> config, train_data, val_data, out, resume;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    RunConfig rc;
    if (a.config) rc = read_run_config(*a.config);
    if (a.train_data) rc.train_data = *a.train_data;
    if (a.val_data) rc.val_data = *a.val_data;
    if (a.out) rc.out_dir = *a.out;
    if (!rc.train_data) throw FlagError("no training data: pass --train-data or set paths.train_data");
    if (!rc.out_dir) throw FlagError("no output directory: pass --out or set paths.out_dir");

    const auto train_set = read_dataset(*rc.train_data);
    Dataset val_set;
    if (rc.val_data) val_set = read_dataset(*rc.val_data);
    if (!train_set.header.labeled) throw InvalidInputError(rc.train_data->string() + " is unlabeled");
    if (rc.val_data && !val_set.header.labeled) throw InvalidInputError(rc.val_data->string() + " is unlabeled");

    TrainState<float> state;
    ModelConfig model;
    TrainConfig config;
    if (a.resume) {
        auto loaded = load_train_state<float>(*a.resume);
        model = loaded.model;
        config = loaded.config;
        state = std::move(loaded.state);
    } else {
        model = rc.model;
        config = rc.train;
        if (!rc.text_width_given) model.input_width_text = train_set.header.text_width;
        if (!rc.image_width_given) model.input_width_image = train_set.header.image_width;
    }
    if (a.seed) config.seed = *a.seed;
    if (a.epochs) config.epochs = *a.epochs;
    model.validate();
    config.validate();
    if (!a.resume) state = start_training<float>(model, config);

    std::error_code ec;
    fs::create_directories(*rc.out_dir, ec);
    if (ec) throw FormatError("io", "cannot create " + rc.out_dir->string() + ": " + ec.message());
    const auto log_path = *rc.out_dir / "epochs.jsonl";
    const auto state_path = *rc.out_dir / "train_state.pcfm";
    const auto model_path = *rc.out_dir / "model.pcfm";

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw FormatError("io", "cannot open " + log_path.string());
    for (const auto& r : state.log) write_line(log, to_json(r));
    log.flush();

    TrainHooks hooks;
    hooks.threads = worker_threads();
    hooks.on_epoch = [&](const EpochRecord& r) {
        write_line(log, to_json(r));
        log.flush();
        write_line(out, to_json(r));
    };
    hooks.on_checkpoint = [&](std::size_t) { save_train_state(state_path, state, model, config); };
    run_training<float>(state, train_set.samples, val_set.samples, model, config, hooks);

    auto result = finish_training(std::move(state));
    save_model(model_path, result.params, model);
    write_line(out, {{"model", model_path.string()},
                     {"epochs", result.log.size()},
                     {"selected_epoch", result.selected_epoch},
                     {"parameters", result.params.parameter_count()}});
    return kExitOk;
}

// ------------------------------------------------------- eval and predict

PredictionSet predict_file(const fs::path& model_path, const Dataset& ds, const std::string& tag) {
    auto loaded = load_model<float>(model_path);
    return predict<float>(ds.samples, loaded.params, loaded.config, tag, worker_threads());
}

struct EvalArgs {
    std::string model, data;
    std::optional<std::string> dump_preds;
    bool json = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto ds = read_dataset(a.data);
    const auto labels = require_labels(ds, a.data);
    const auto preds = predict_file(a.model, ds, fs::path(a.model).stem().string());
    if (a.dump_preds) write_predictions(*a.dump_preds, preds);
    report(out, evaluate(argmax_predict(preds.scores), labels), a.json);
    return kExitOk;
}

struct PredictArgs {
    std::string model, data, out;
    std::optional<std::string> tag;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
    const auto ds = read_dataset(a.data);
    const auto preds = predict_file(a.model, ds, a.tag.value_or(fs::path(a.model).stem().string()));
    write_predictions(a.out, preds);
    write_line(out, {{"predictions", a.out}, {"samples", preds.size()}, {"model_tag", preds.model_tag}});
    return kExitOk;
}

// --------------------------------------------------------------- ensemble

struct EnsembleArgs {
    std::vector<std::string> preds;
    std::vector<double> weights;
    double power = 0.5;
    std::optional<std::string> labels, out;
    bool grid = false;
    std::vector<double> grid_values{0.0, 0.1, 0.2, 0.3, 0.6};
    std::vector<double> grid_powers{0.5, 1.0};
    bool json = false;
};

// Labels of `data` in the order of `ids`.
std::vector<int> labels_in_order(const fs::path& data, const std::vector<std::string>& ids) {
    const auto ds = read_dataset(data);
    require_labels(ds, data);
    std::unordered_map<std::string, int> by_id;
    for (const auto& s : ds.samples) by_id.emplace(s.id, *s.label);
    std::vector<int> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw JoinError("sample '" + id + "' has no label in " + data.string());
        out.push_back(it->second);
    }
    return out;
}

std::string join_numbers(const std::vector<double>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

int cmd_ensemble(const EnsembleArgs& a, std::ostream& out) {
    std::vector<PredictionSet> members;
    for (const auto& p : a.preds) members.push_back(read_predictions(p));

    EnsembleConfig config{a.weights, a.power};
    if (a.grid) {
        if (!a.labels) throw FlagError("--grid needs --labels");
        if (!a.weights.empty()) throw FlagError("--grid searches weights; do not pass --weights");
        const auto labels = labels_in_order(*a.labels, members.front().sample_ids);
        const auto grid = cartesian_weight_grid(a.grid_values, members.size());
        const auto result = grid_search(members, grid, a.grid_powers, labels);
        for (const auto& point : result.table)
            write_line(out, {{"weights", point.weights}, {"power", point.power}, {"weighted_f1", point.weighted_f1}});
        write_line(out, {{"best_weights", result.best.weights},
                         {"best_power", result.best.power},
                         {"best_weighted_f1", result.best_weighted_f1}});
        // Zero-weight members contribute nothing, so they are dropped.
        std::vector<PredictionSet> kept;
        config = {{}, result.best.power};
        for (std::size_t m = 0; m < members.size(); ++m)
            if (result.best.weights[m] > 0.0) {
                kept.push_back(members[m]);
                config.weights.push_back(result.best.weights[m]);
            }
        members = std::move(kept);
    } else if (a.weights.size() != members.size()) {
        throw FlagError(std::to_string(members.size()) + " prediction files but " + std::to_string(a.weights.size()) +
                        " weights");
    }
    for (double w : config.weights)
        if (!(w > 0.0)) throw FlagError("weights must be positive");
    if (!(config.power > 0.0)) throw FlagError("--power must be positive");

    const auto combined = combine(members, config);
    if (a.out) write_predictions(*a.out, combined);
    if (a.labels && !a.grid)
        report(out, evaluate(argmax_predict(combined.scores), labels_in_order(*a.labels, combined.sample_ids)),
               a.json);
    if (a.out)
        write_line(out, {{"predictions", *a.out},
                         {"samples", combined.size()},
                         {"weights", join_numbers(config.weights)},
                         {"power", config.power}});
    return kExitOk;
}

// ----------------------------------------------------- generate-synthetic

struct GenerateArgs {
    std::string out;
    std::string task = "gaussian";
    SyntheticSpec spec;
    AgreementSpec agreement;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
    std::size_t count = 0;
    if (a.task == "gaussian") {
        SyntheticGenerator gen(a.spec);
        DatasetWriter writer(fs::path(a.out), gen.header());
        while (auto s = gen.next()) writer.write(*s);
        writer.close();
        count = gen.total();
    } else if (a.task == "agreement") {
        if (!a.spec.labeled) throw FlagError("the agreement task is always labeled");
        if (a.spec.text_width != a.spec.image_width)
            throw FlagError("the agreement task uses one width for text and image");
        auto spec = a.agreement;
        spec.samples_per_class = a.spec.samples_per_class;
        spec.width = a.spec.text_width;
        spec.min_tokens = std::max<std::size_t>(a.spec.min_tokens, 3);
        spec.max_tokens = std::max(a.spec.max_tokens, spec.min_tokens);
        spec.noise = a.spec.noise;
        spec.seed = a.spec.seed;
        const auto ds = generate_agreement_task(spec);
        write_dataset(a.out, ds);
        count = ds.samples.size();
    } else {
        throw FlagError("--task must be gaussian or agreement");
    }
    write_line(out, {{"dataset", a.out}, {"samples", count}, {"task", a.task}});
    return kExitOk;
}

// ---------------------------------------------------------------- inspect

std::string file_magic(const fs::path& path) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) throw NotFoundError("no such file: " + path.string());
    std::ifstream in(path, std::ios::binary);
    char m[4] = {};
    in.read(m, 4);
    if (in.gcount() != 4) throw FormatError("bad-magic", path.string() + " is too short to identify");
    return std::string(m, 4);
}

int cmd_inspect(const std::string& file, bool json, std::ostream& out) {
    const auto magic = file_magic(file);
    if (magic == "PCF1") {
        const DatasetReader reader{fs::path(file)};
        const auto header = reader.header();
        const auto stats = dataset_stats(fs::path(file));
        if (json) {
            auto j = to_json(stats);
            j["kind"] = "dataset";
            j["text_width"] = header.text_width;
            j["image_width"] = header.image_width;
            j["labeled"] = header.labeled;
            write_line(out, j);
            return kExitOk;
        }
        out << "kind dataset\n";
        out << "samples " << stats.samples << '\n';
        out << "text_width " << header.text_width << '\n';
        out << "image_width " << header.image_width << '\n';
        out << "labeled " << (header.labeled ? "true" : "false") << '\n';
        for (std::size_t c = 0; c < kNumClasses; ++c) {
            out << "class " << kClassNames[c] << ' ';
            if (stats.labeled)
                out << stats.class_counts[c] << '\n';
            else
                out << "absent\n";
        }
        for (std::size_t s = 0; s < kNumSources; ++s) {
            const auto& l = stats.token_lengths[s];
            out << "tokens " << kSourceNames[s] << " min " << l.min << " mean " << std::fixed << std::setprecision(3)
                << l.mean << std::defaultfloat << " max " << l.max << '\n';
        }
        return kExitOk;
    }
    if (magic == "PCFM") {
        const auto ckpt = read_checkpoint(file);
        std::size_t values = 0;
        for (const auto& [name, t] : ckpt.records) values += t.size();
        nlohmann::json meta = nlohmann::json::parse(ckpt.config_text, nullptr, false);
        nlohmann::json j{{"kind", "checkpoint"}, {"records", ckpt.records.size()}, {"values", values}};
        j["format"] = meta.is_object() ? meta.value("format", "unknown") : "unknown";
        if (meta.is_object() && meta.contains("config")) j["config"] = meta["config"];
        if (meta.is_object() && meta.contains("model")) j["config"] = meta["model"];
        if (json) {
            write_line(out, j);
            return kExitOk;
        }
        out << "kind checkpoint\n"
            << "format " << j["format"].get<std::string>() << '\n'
            << "records " << ckpt.records.size() << '\n'
            << "values " << values << '\n';
        if (j.contains("config")) out << "config " << j["config"].dump() << '\n';
        return kExitOk;
    }
    if (magic == "PCFP") {
        const auto preds = read_predictions(file);
        if (json) {
            write_line(out, {{"kind", "predictions"}, {"model_tag", preds.model_tag}, {"samples", preds.size()}});
            return kExitOk;
        }
        out << "kind predictions\n"
            << "model_tag " << preds.model_tag << '\n'
            << "samples " << preds.size() << '\n';
        return kExitOk;
    }
    throw FormatError("bad-magic", file + " is not a PCF1, PCFM or PCFP file");
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multimodal claim/document entailment engine", "precofact"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model and write model.pcfm plus epochs.jsonl");
    train->add_option("--config", train_args.config, "JSON run config");
    train->add_option("--train-data", train_args.train_data, "Labeled PCF1 training set");
    train->add_option("--val-data", train_args.val_data, "Labeled PCF1 validation set");
    train->add_option("--out", train_args.out, "Output directory");
    train->add_option("--seed", train_args.seed, "Overrides train.seed");
    train->add_option("--epochs", train_args.epochs, "Overrides train.epochs");
    train->add_option("--resume", train_args.resume, "Continue from a train_state.pcfm");

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Evaluate a model on a labeled PCF1 set");
    eval->add_option("--model", eval_args.model, "Model checkpoint")->required();
    eval->add_option("--data", eval_args.data, "Labeled PCF1 set")->required();
    eval->add_option("--dump-preds", eval_args.dump_preds, "Also write a PCFP prediction file");
    eval->add_flag("--json", eval_args.json, "Report as one JSON line");

    PredictArgs predict_args;
    auto* pred = app.add_subcommand("predict", "Write per-sample class probabilities");
    pred->add_option("--model", predict_args.model, "Model checkpoint")->required();
    pred->add_option("--data", predict_args.data, "PCF1 set, labels optional")->required();
    pred->add_option("--out", predict_args.out, "PCFP output file")->required();
    pred->add_option("--tag", predict_args.tag, "Model tag stored in the file");

    EnsembleArgs ens_args;
    auto* ens = app.add_subcommand("ensemble", "Combine prediction files as sum w_i * p_i^N");
    ens->add_option("--preds", ens_args.preds, "PCFP files")->required();
    ens->add_option("--weights", ens_args.weights, "One weight per file");
    ens->add_option("--power", ens_args.power, "Exponent N")->capture_default_str();
    ens->add_option("--labels", ens_args.labels, "Labeled PCF1 set for a report");
    ens->add_option("--out", ens_args.out, "Combined PCFP output");
    ens->add_flag("--grid", ens_args.grid, "Search weights and powers on --labels");
    ens->add_option("--grid-values", ens_args.grid_values, "Per-member weight values")->capture_default_str();
    ens->add_option("--grid-powers", ens_args.grid_powers, "Powers")->capture_default_str();
    ens->add_flag("--json", ens_args.json, "Report as one JSON line");

    GenerateArgs gen_args;
    auto* gen = app.add_subcommand("generate-synthetic", "Write a synthetic PCF1 dataset");
    gen->add_option("--out", gen_args.out, "PCF1 output file")->required();
    gen->add_option("--task", gen_args.task, "gaussian or agreement")->capture_default_str();
    gen->add_option("--samples-per-class", gen_args.spec.samples_per_class)->capture_default_str();
    gen->add_option("--text-width", gen_args.spec.text_width)->capture_default_str();
    gen->add_option("--image-width", gen_args.spec.image_width)->capture_default_str();
    gen->add_option("--min-tokens", gen_args.spec.min_tokens)->capture_default_str();
    gen->add_option("--max-tokens", gen_args.spec.max_tokens)->capture_default_str();
    gen->add_option("--separation", gen_args.spec.separation)->capture_default_str();
    gen->add_option("--noise", gen_args.spec.noise)->capture_default_str();
    gen->add_option("--seed", gen_args.spec.seed)->capture_default_str();
    gen->add_option("--structure-seed", gen_args.agreement.structure_seed,
                    "Agreement task: payload and key directions, shared by train and held-out sets")
        ->capture_default_str();
    bool unlabeled = false;
    gen->add_flag("--unlabeled", unlabeled, "Write without labels");

    std::string inspect_file;
    bool inspect_json = false;
    auto* insp = app.add_subcommand("inspect", "Summarize a PCF1, PCFM or PCFP file");
    insp->add_option("file", inspect_file, "File to inspect")->required();
    insp->add_flag("--json", inspect_json, "One JSON line");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: flag: " << e.what() << '\n';
        return kExitFlagContract;
    }

    try {
        if (train->parsed()) return cmd_train(train_args, out);
        if (eval->parsed()) return cmd_eval(eval_args, out);
        if (pred->parsed()) return cmd_predict(predict_args, out);
        if (ens->parsed()) return cmd_ensemble(ens_args, out);
        if (gen->parsed()) {
            gen_args.spec.labeled = !unlabeled;
            return cmd_generate(gen_args, out);
        }
        if (insp->parsed()) return cmd_inspect(inspect_file, inspect_json, out);
    } catch (const Error& e) {
        err << "error: " << e.category() << ": " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << '\n';
        return kExitOther;
    }
    return kExitOther;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    for (const auto& a : args) argv.push_back(a.c_str());
    argv.push_back(nullptr);
    return run(static_cast<int>(args.size()), argv.data(), out, err);
}

} // namespace precofact::cli
