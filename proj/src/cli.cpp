#include "tulip/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include "tulip/config.hpp"
#include "tulip/error.hpp"
#include "tulip/eval.hpp"
#include "tulip/manifest.hpp"
#include "tulip/training.hpp"

namespace fs = std::filesystem;

namespace tulip::cli {

namespace {

struct MissingInput : Error {
    using Error::Error;
};

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::vector<std::string> sets;

    // gen
    std::size_t count = 0;
    std::optional<double> long_fraction;
    std::string attr_offset;
    std::string output = "corpus.jsonl";

    std::string corpus, teacher, checkpoint, student;
    std::string distill_corpus, eval_corpus;
    std::string scheme, loss;
    std::optional<std::size_t> t_g;
    std::optional<double> alpha, lambda;
    bool freeze_vision = false;
    bool force = false;
    std::string ks = "1,5,10";
    std::size_t index = 0;
    std::optional<std::size_t> layer;
    std::string axis, values;
    std::size_t length = 100;
};

fs::path require_file(const std::string& flag, const std::string& value) {
    if (value.empty()) throw ConfigError(flag + " is required");
    fs::path p = value;
    if (!fs::is_regular_file(p)) throw MissingInput(flag + ": no such file '" + value + "'");
    return p;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<std::size_t> parse_ks(const std::string& text) {
    std::vector<std::size_t> ks;
    for (const auto& item : split_list(text)) {
        if (item.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError("--k: expected a comma-separated list of integers, got '" + text + "'");
        ks.push_back(std::stoull(item));
    }
    if (ks.empty()) throw ConfigError("--k: empty list");
    return ks;
}

std::string fmt(double v, const char* spec = "%.4f") {
    char buf[48];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

std::string short_hash(const fs::path& path) { return sha256_file(path).substr(0, 12); }

std::string retrieval_table(std::span<const RetrievalReport> reports) {
    std::string out = "direction";
    if (!reports.empty())
        for (auto k : reports.front().k) out += "\tR@" + std::to_string(k);
    out += '\n';
    for (const auto& r : reports) {
        out += std::string(to_string(r.direction));
        for (double v : r.recall) out += '\t' + fmt(v, "%.2f");
        out += '\n';
    }
    return out;
}

TokenSequence probe_sequence(std::size_t length) {
    if (length < 2) throw ConfigError("--length must be at least 2");
    TokenSequence seq;
    seq.ids.push_back(kBos);
    for (std::size_t i = 0; i + 2 < length; ++i) seq.ids.push_back(kByteOffset + 'a' + static_cast<int>(i % 26));
    seq.ids.push_back(kEos);
    return seq;
}

class Runner {
public:
    Runner(const Options& o, RunConfig cfg, std::vector<std::string> args, std::ostream& out)
        : o_(o), cfg_(std::move(cfg)), out_(out) {
        manifest_.arguments = std::move(args);
        manifest_.seed = cfg_.seed;
        manifest_.config = config_snapshot(cfg_);
        manifest_.started_at = utc_timestamp();
    }

    int dispatch(const std::string& command) {
        manifest_.command = command;
        fs::create_directories(o_.out_dir);
        static const std::map<std::string, void (Runner::*)()> table = {
            {"gen", &Runner::gen},
            {"make-teacher", &Runner::make_teacher_cmd},
            {"distill", &Runner::distill},
            {"expand", &Runner::expand},
            {"eval", &Runner::eval},
            {"analyze-attention", &Runner::analyze_attention},
            {"analyze-relevance", &Runner::analyze_relevance},
            {"sweep", &Runner::sweep},
            {"probe", &Runner::probe},
        };
        (this->*table.at(command))();
        manifest_.finished_at = utc_timestamp();
        write_manifest(out_path(command + ".manifest.json"), manifest_);
        return kOk;
    }

private:
    fs::path out_path(const std::string& name) const {
        const fs::path p(name);
        return p.is_absolute() ? p : fs::path(o_.out_dir) / p;
    }

    Corpus input_corpus(const std::string& role, const std::string& flag, const std::string& value) {
        const fs::path p = require_file(flag, value);
        manifest_.add_input(role, p);
        return load_corpus(p);
    }

    Checkpoint input_checkpoint(const std::string& role, const std::string& flag, const std::string& value) {
        const fs::path p = require_file(flag, value);
        manifest_.add_input(role, p);
        return load_checkpoint(p);
    }

    void emit(const std::string& role, const fs::path& path, std::string_view text) {
        write_text_file(path, text);
        manifest_.add_output(role, path);
    }

    void emit_checkpoint(const std::string& role, const fs::path& path, const Checkpoint& ckpt) {
        save_checkpoint(path, ckpt);
        manifest_.add_output(role, path);
        out_ << "wrote " << path.string() << '\n';
    }

    ExpandConfig expand_settings() const { return cfg_.expand; }

    void gen() {
        const GenConfig& g = cfg_.gen;
        if (g.count == 0) throw ConfigError("--count is required");
        const Corpus corpus = generate_synthetic_corpus(cfg_.seed, g.count, g.long_fraction, g.attr_offset);
        const fs::path path = out_path(o_.output);
        save_corpus(path, corpus);
        manifest_.add_output("corpus", path);
        out_ << "wrote " << corpus.size() << " pairs to " << path.string() << '\n';
    }

    void make_teacher_cmd() {
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const TrainResult r = make_teacher(corpus, cfg_.teacher);
        emit_checkpoint("checkpoint", out_path("teacher.ckpt"), r.checkpoint);
        emit("loss", out_path("teacher_loss.csv"), loss_history_csv(r.history));
    }

    DistillConfig distill_settings() const { return cfg_.distill; }
    EncoderConfig student_settings() const { return cfg_.student_text(); }

    void distill() {
        const Checkpoint teacher = input_checkpoint("teacher", "--teacher", o_.teacher);
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const TrainResult r = run_distillation(teacher, student_settings(), corpus, distill_settings());
        emit_checkpoint("checkpoint", out_path("distilled.ckpt"), r.checkpoint);
        emit("loss", out_path("distill_loss.csv"), loss_history_csv(r.history));
    }

    void expand() {
        const Checkpoint ckpt = input_checkpoint("checkpoint", "--checkpoint", o_.checkpoint);
        if (ckpt.phase != "distilled" && !o_.force)
            throw PhaseError("expand needs a distilled checkpoint, got phase '" + ckpt.phase +
                             "' (pass --force to expand it anyway)");
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const TrainResult r = run_expansion(ckpt, corpus, expand_settings());
        emit_checkpoint("checkpoint", out_path("expanded.ckpt"), r.checkpoint);
        emit("loss", out_path("expand_loss.csv"), loss_history_csv(r.history));
    }

    void eval() {
        const auto ks = parse_ks(o_.ks);
        const Checkpoint ckpt = input_checkpoint("checkpoint", "--checkpoint", o_.checkpoint);
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        auto reports = evaluate_retrieval(ckpt.model, corpus, ks);
        const std::string dataset = fs::path(o_.corpus).filename().string() + ":" + short_hash(o_.corpus);
        const std::string model = fs::path(o_.checkpoint).filename().string() + ":" + short_hash(o_.checkpoint);
        for (auto& r : reports) {
            r.dataset_id = dataset;
            r.checkpoint_id = model;
        }
        out_ << retrieval_table(reports);
        emit("retrieval", out_path("retrieval.csv"), retrieval_csv(reports));
        emit("retrieval_svg", out_path("retrieval.svg"), retrieval_svg(reports));
    }

    const ImageCaptionPair& pick(const Corpus& corpus) const {
        if (o_.index >= corpus.size())
            throw ContractError("--index " + std::to_string(o_.index) + " is past the corpus size " +
                                std::to_string(corpus.size()));
        return corpus[o_.index];
    }

    void analyze_attention() {
        const Checkpoint ckpt = input_checkpoint("checkpoint", "--checkpoint", o_.checkpoint);
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const auto& cfg = ckpt.model.text_config;
        const TokenSequence tokens = truncate(tokenize(pick(corpus).caption), cfg.max_sequence());
        const AttentionSpread spread = attention_spread(ckpt.model.text, cfg, tokens, o_.layer);
        out_ << "tokens\t" << tokens.n() << "\nentropy\t" << fmt(spread.entropy, "%.6f") << "\nmass_beyond_77\t"
             << fmt(spread.mass_beyond, "%.6f") << '\n';
        emit("attention", out_path("attention.csv"), attention_csv(spread));
        emit("attention_svg", out_path("attention.svg"), attention_svg(spread));
    }

    void analyze_relevance() {
        const Checkpoint ckpt = input_checkpoint("checkpoint", "--checkpoint", o_.checkpoint);
        const Corpus corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const auto grids = relevance_distribution(ckpt.model, pick(corpus));
        for (const auto& g : grids) {
            double best = -2.0;
            std::size_t at = 0;
            for (const auto& w : g.windows)
                if (w.cosine > best) best = w.cosine, at = w.start;
            out_ << "size " << g.window_size << "\twindows " << g.windows.size() << "\tbest start " << at
                 << "\tcosine " << fmt(best, "%.6f") << '\n';
        }
        emit("relevance", out_path("relevance.csv"), relevance_csv(grids));
        emit("relevance_svg", out_path("relevance.svg"), relevance_svg(grids));
    }

    void probe() {
        const Checkpoint ckpt = input_checkpoint("checkpoint", "--checkpoint", o_.checkpoint);
        const auto& cfg = ckpt.model.text_config;
        const TokenSequence seq = probe_sequence(o_.length);
        const SequenceEmbedding e = encode_text(ckpt.model.text, cfg, seq);
        out_ << "encoded " << e.source_length << " tokens with " << posenc::to_string(cfg.position.kind)
             << " (window " << cfg.max_sequence() << ")\n";
    }

    void sweep() {
        static const std::map<std::string, std::string> defaults = {
            {"scheme", "absolute,rope,rope_ntk,cope"},
            {"t_g", "77,154,231,308"},
            {"distill_loss", "cosine,l2,mse"},
            {"lambda", "0,0.25,0.5,0.75,1"},
        };
        const auto axis_it = defaults.find(o_.axis);
        if (axis_it == defaults.end())
            throw ConfigError("--axis must be one of scheme, t_g, distill_loss, lambda; got '" + o_.axis + "'");
        const auto values = split_list(o_.values.empty() ? axis_it->second : o_.values);
        const auto ks = parse_ks(o_.ks);

        const Checkpoint teacher = input_checkpoint("teacher", "--teacher", o_.teacher);
        const Corpus expand_corpus = input_corpus("corpus", "--corpus", o_.corpus);
        const Corpus distill_corpus = o_.distill_corpus.empty()
                                          ? expand_corpus
                                          : input_corpus("distill_corpus", "--distill-corpus", o_.distill_corpus);
        const Corpus eval_corpus =
            o_.eval_corpus.empty() ? expand_corpus : input_corpus("eval_corpus", "--eval-corpus", o_.eval_corpus);
        std::optional<Checkpoint> student;
        if (!o_.student.empty()) student = input_checkpoint("student", "--student", o_.student);

        std::map<std::string, Checkpoint> distilled;  // keyed by scheme/loss
        auto distilled_for = [&](posenc::Scheme scheme, DistillLossKind kind) -> const Checkpoint& {
            const std::string key = std::string(posenc::to_string(scheme)) + "/" + std::string(to_string(kind));
            if (student && student->model.text_config.position.kind == scheme && o_.axis != "distill_loss")
                return *student;
            auto it = distilled.find(key);
            if (it == distilled.end()) {
                EncoderConfig s = cfg_.student_text();
                s.position.kind = scheme;
                DistillConfig d = distill_settings();
                d.loss_kind = kind;
                it = distilled.emplace(key, run_distillation(teacher, s, distill_corpus, d).checkpoint).first;
            }
            return it->second;
        };

        std::string csv = "axis,value,metric,score\n";
        for (const auto& value : values) {
            ExpandConfig e = expand_settings();
            const Checkpoint* base = nullptr;
            const DistillLossKind kind = distill_settings().loss_kind;
            posenc::Scheme scheme = student_settings().position.kind;
            if (scheme == posenc::Scheme::rope_ntk) scheme = posenc::Scheme::rope;
            if (o_.axis == "scheme") {
                const auto s = posenc::parse_scheme(value);
                if (s == posenc::Scheme::absolute) {
                    base = &teacher;
                } else {
                    e.ntk = s == posenc::Scheme::rope_ntk;
                    base = &distilled_for(s == posenc::Scheme::rope_ntk ? posenc::Scheme::rope : s, kind);
                }
            } else if (o_.axis == "t_g") {
                set_config_value(cfg_scratch_, "expand.t_g", value);
                e.t_g = cfg_scratch_.expand.t_g;
                base = &distilled_for(scheme, kind);
            } else if (o_.axis == "distill_loss") {
                base = &distilled_for(scheme, parse_distill_loss(value));
            } else {
                set_config_value(cfg_scratch_, "expand.lambda", value);
                e.lambda = cfg_scratch_.expand.lambda;
                base = &distilled_for(scheme, kind);
            }
            const TrainResult r = run_expansion(*base, expand_corpus, e);
            for (const auto& rep : evaluate_retrieval(r.checkpoint.model, eval_corpus, ks))
                for (std::size_t i = 0; i < rep.k.size(); ++i)
                    csv += o_.axis + "," + value + "," + std::string(to_string(rep.direction)) + "_R@" +
                           std::to_string(rep.k[i]) + "," + fmt(rep.recall[i]) + "\n";
            out_ << o_.axis << "=" << value << " done\n";
        }
        const fs::path path = out_path("sweep_" + o_.axis + ".csv");
        emit("sweep", path, csv);
        out_ << csv;
    }

    const Options& o_;
    RunConfig cfg_;
    RunConfig cfg_scratch_;
    std::ostream& out_;
    RunManifest manifest_;
};

void add_globals(CLI::App& app, Options& o) {
    app.add_option("--config", o.config_path, "key = value run config file");
    app.add_option("--seed", o.seed, "seed for every stage");
    app.add_option("--out", o.out_dir, "output directory (created if missing)");
    app.add_option("--set", o.sets, "override one config key, key=value")->take_all();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Relative-position distillation and expansion for toy dual encoders", "tulip"};
    app.require_subcommand(1);
    add_globals(app, o);

    auto* gen = app.add_subcommand("gen", "generate a synthetic image-caption corpus");
    gen->add_option("--count", o.count, "number of pairs");
    gen->add_option("--long-fraction", o.long_fraction, "share of captions longer than 77 tokens")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--attr-offset", o.attr_offset, "early, late or mixed")
        ->check(CLI::IsMember({"early", "late", "mixed"}));
    gen->add_option("--output", o.output, "corpus file name inside --out");

    auto* teacher = app.add_subcommand("make-teacher", "train the absolute-position teacher");
    teacher->add_option("--corpus", o.corpus, "training corpus (jsonl)")->required();

    auto* distill = app.add_subcommand("distill", "distill the teacher into a relative-position student");
    distill->add_option("--teacher", o.teacher, "teacher checkpoint")->required();
    distill->add_option("--corpus", o.corpus, "distillation corpus")->required();
    distill->add_option("--scheme", o.scheme)->check(CLI::IsMember({"rope", "rope_ntk", "cope"}));
    distill->add_option("--loss", o.loss)->check(CLI::IsMember({"cosine", "l2", "mse"}));

    auto* expand = app.add_subcommand("expand", "extend the window with the joint short/long objective");
    expand->add_option("--checkpoint", o.checkpoint, "distilled checkpoint")->required();
    expand->add_option("--corpus", o.corpus, "expansion corpus")->required();
    expand->add_option("--t-g", o.t_g);
    expand->add_option("--alpha", o.alpha);
    expand->add_option("--lambda", o.lambda)->check(CLI::Range(0.0, 1.0));
    expand->add_flag("--freeze-vision", o.freeze_vision);
    expand->add_flag("--force", o.force, "expand a checkpoint that is not tagged distilled");

    auto* eval = app.add_subcommand("eval", "image-text retrieval in both directions");
    eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
    eval->add_option("--corpus", o.corpus, "evaluation corpus")->required();
    eval->add_option("--k", o.ks, "comma-separated K list");

    auto* attn = app.add_subcommand("analyze-attention", "attention of the aggregation token over the caption");
    attn->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
    attn->add_option("--corpus", o.corpus, "evaluation corpus")->required();
    attn->add_option("--index", o.index);
    attn->add_option("--layer", o.layer);

    auto* rel = app.add_subcommand("analyze-relevance", "sliding-window caption-image relevance");
    rel->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
    rel->add_option("--corpus", o.corpus, "evaluation corpus")->required();
    rel->add_option("--index", o.index);

    auto* sweep = app.add_subcommand("sweep", "ablation over one axis");
    sweep->add_option("--axis", o.axis)->required()->check(CLI::IsMember({"scheme", "t_g", "distill_loss", "lambda"}));
    sweep->add_option("--values", o.values, "comma-separated values, default is the full grid");
    sweep->add_option("--teacher", o.teacher, "teacher checkpoint")->required();
    sweep->add_option("--student", o.student, "distilled checkpoint reused instead of distilling again");
    sweep->add_option("--corpus", o.corpus, "expansion corpus")->required();
    sweep->add_option("--distill-corpus", o.distill_corpus, "distillation corpus, default --corpus");
    sweep->add_option("--eval-corpus", o.eval_corpus, "evaluation corpus, default --corpus");
    sweep->add_option("--k", o.ks, "comma-separated K list");

    auto* probe = app.add_subcommand("probe", "encode a synthetic caption of a given length");
    probe->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
    probe->add_option("--length", o.length);

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    const auto chosen = app.get_subcommands();
    const std::string command = chosen.front()->get_name();

    try {
        RunConfig cfg;
        if (!o.config_path.empty()) cfg = load_run_config(require_file("--config", o.config_path));
        for (const auto& kv : o.sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (o.seed) set_config_value(cfg, "seed", std::to_string(*o.seed));
        // Subcommand flags win over the file and land in the manifest snapshot.
        if (o.count) cfg.gen.count = o.count;
        if (o.long_fraction) cfg.gen.long_fraction = *o.long_fraction;
        if (!o.attr_offset.empty()) cfg.gen.attr_offset = parse_attr_offset(o.attr_offset);
        if (!o.scheme.empty()) cfg.student_scheme = posenc::parse_scheme(o.scheme);
        if (!o.loss.empty()) cfg.distill.loss_kind = parse_distill_loss(o.loss);
        if (o.t_g) cfg.expand.t_g = *o.t_g;
        if (o.alpha) cfg.expand.alpha = *o.alpha;
        if (o.lambda) cfg.expand.lambda = *o.lambda;
        if (o.freeze_vision) cfg.expand.vision_trainable = false;
        if (cfg.phase && *cfg.phase != command)
            throw ConfigError("config is for '" + *cfg.phase + "', not '" + command + "'");
        if (command == "gen" && cfg.gen.count == 0) {
            err << "error: --count is required\n\n" << gen->help();
            return kUsage;
        }
        Runner runner(o, std::move(cfg), args, out);
        return runner.dispatch(command);
    } catch (const PhaseError& e) {
        err << "phase mismatch: " << e.what() << '\n';
        return kPhaseMismatch;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << '\n';
        return kNumericFailure;
    } catch (const OutOfWindowError& e) {
        err << "out of window: " << e.what() << '\n';
        return kOutOfWindow;
    } catch (const MissingInput& e) {
        err << "missing input: " << e.what() << '\n';
        return kMissingInput;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return kMissingInput;
    } catch (const ParseError& e) {
        err << "malformed input: " << e.what() << '\n';
        return kMissingInput;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const ContractError& e) {
        err << "invalid request: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

}  // namespace tulip::cli
