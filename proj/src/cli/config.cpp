#include "stella/cli/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace stella::cli {

namespace {

struct Field {
    std::string section;
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

std::string where(const std::string& section, const std::string& key) { return "[" + section + "] " + key; }

template <typename T>
Field unsigned_field(std::string section, std::string key, T& ref) {
    return {section, key,
            [&ref, section, key](const std::string& v) {
                unsigned long long x = 0;
                auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
                if (ec != std::errc() || end != v.data() + v.size() || v.empty()) {
                    throw ConfigError(where(section, key) + ": expected a non-negative integer, got '" + v + "'");
                }
                ref = static_cast<T>(x);
            },
            [&ref] { return std::to_string(ref); }};
}

Field double_field(std::string section, std::string key, double& ref) {
    return {section, key,
            [&ref, section, key](const std::string& v) {
                std::size_t used = 0;
                double x = 0.0;
                try {
                    x = std::stod(v, &used);
                } catch (const std::exception&) {
                    used = 0;
                }
                if (used == 0 || used != v.size() || !std::isfinite(x)) {
                    throw ConfigError(where(section, key) + ": expected a number, got '" + v + "'");
                }
                ref = x;
            },
            [&ref] {
                char buf[32];
                auto res = std::to_chars(buf, buf + sizeof buf, ref);  // shortest round-trip form
                return std::string(buf, res.ptr);
            }};
}

Field bool_field(std::string section, std::string key, bool& ref) {
    return {section, key,
            [&ref, section, key](const std::string& v) {
                if (v == "true") {
                    ref = true;
                } else if (v == "false") {
                    ref = false;
                } else {
                    throw ConfigError(where(section, key) + ": expected true or false, got '" + v + "'");
                }
            },
            [&ref] { return std::string(ref ? "true" : "false"); }};
}

std::vector<Field> fields(RunConfig& c) {
    auto& g = c.data.geometry;
    auto& sig = c.data.signature;
    auto& m = c.model;
    auto& t = c.train;
    std::vector<Field> f;
    f.push_back(unsigned_field("data", "num_tasks", c.data.num_tasks));
    f.push_back(unsigned_field("data", "classes_per_task", c.data.classes_per_task));
    f.push_back(unsigned_field("data", "train_per_task", c.data.train_per_task));
    f.push_back(unsigned_field("data", "eval_per_task", c.data.eval_per_task));
    f.push_back(unsigned_field("data", "seed", c.data.seed));
    f.push_back(unsigned_field("data", "audio_time", g.audio.time));
    f.push_back(unsigned_field("data", "audio_freq", g.audio.freq));
    f.push_back(unsigned_field("data", "audio_patch", g.audio.patch));
    f.push_back(unsigned_field("data", "video_frames", g.video.frames));
    f.push_back(unsigned_field("data", "video_height", g.video.height));
    f.push_back(unsigned_field("data", "video_width", g.video.width));
    f.push_back(unsigned_field("data", "video_patch", g.video.patch));
    f.push_back(unsigned_field("data", "video_channels", g.video.channels));
    f.push_back(double_field("data", "noise_std", sig.noise_std));
    f.push_back(double_field("data", "amplitude", sig.amplitude));
    f.push_back(double_field("data", "correlation", sig.correlation));
    f.push_back(bool_field("data", "align_to_grid", sig.align_to_grid));
    f.push_back(unsigned_field("data", "signature_video_size", sig.video_size));
    f.push_back(unsigned_field("data", "signature_video_frames", sig.video_frames));
    f.push_back(unsigned_field("data", "signature_audio_time", sig.audio_time));
    f.push_back(unsigned_field("data", "signature_audio_freq", sig.audio_freq));

    f.push_back(unsigned_field("model", "embed_dim", m.embed_dim));
    f.push_back(unsigned_field("model", "heads", m.heads));
    f.push_back(unsigned_field("model", "encoder_layers", m.encoder_layers));
    f.push_back(unsigned_field("model", "fusion_layers", m.fusion_layers));
    f.push_back(unsigned_field("model", "decoder_layers", m.decoder_layers));
    f.push_back(unsigned_field("model", "mlp_ratio", m.mlp_ratio));
    f.push_back(double_field("model", "mask_prob", m.mask_prob));
    f.push_back(double_field("model", "tau", m.tau));
    f.push_back(double_field("model", "lambda", m.lambda));
    f.push_back(double_field("model", "ln_eps", m.ln_eps));

    f.push_back({"train", "strategy", [&t](const std::string& v) { t.strategy = trainer::parse_strategy(v); },
                 [&t] { return std::string(trainer::strategy_name(t.strategy)); }});
    f.push_back(double_field("train", "alpha", t.alpha));
    f.push_back(double_field("train", "rho_a", t.select.rho_a));
    f.push_back(double_field("train", "rho_v", t.select.rho_v));
    f.push_back(unsigned_field("train", "chunk", t.select.chunk));
    f.push_back(double_field("train", "beta", t.select.beta));
    f.push_back(unsigned_field("train", "batch", t.batch));
    f.push_back(unsigned_field("train", "epochs", t.epochs));
    f.push_back(unsigned_field("train", "memory", t.memory));
    f.push_back(double_field("train", "lr", t.optim.lr));
    f.push_back(double_field("train", "beta1", t.optim.beta1));
    f.push_back(double_field("train", "beta2", t.optim.beta2));
    f.push_back(double_field("train", "eps", t.optim.eps));
    f.push_back(double_field("train", "weight_decay", t.optim.weight_decay));
    f.push_back(double_field("train", "avm_lr", t.avm_lr));
    f.push_back(unsigned_field("train", "seed", t.seed));

    f.push_back(unsigned_field("eval", "workers", c.eval_workers));
    return f;
}

// Strategy-specific keys; everything else applies to all strategies.
bool applies(const std::string& key, trainer::Strategy s) {
    if (key == "alpha") return trainer::uses_penalty(s);
    if (key == "rho_a" || key == "rho_v" || key == "chunk") return trainer::uses_selection(s);
    if (key == "beta") return trainer::uses_avm(s);
    if (key == "memory") return trainer::uses_memory(s);
    return true;
}

}  // namespace

RunConfig parse_config(std::istream& is) {
    // '#' comment lines are accepted alongside the parser's ';'
    std::stringstream cleaned;
    for (std::string line; std::getline(is, line);) {
        auto first = line.find_first_not_of(" \t");
        if (first != std::string::npos && line[first] == '#') continue;
        cleaned << line << '\n';
    }
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(cleaned, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    RunConfig cfg;
    auto table = fields(cfg);
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) {
            throw ConfigError("key '" + section + "' outside of a section");
        }
        if (section != "data" && section != "model" && section != "train" && section != "eval") {
            throw ConfigError("unknown config section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            auto it = std::find_if(table.begin(), table.end(),
                                   [&](const Field& f) { return f.section == section && f.key == key; });
            if (it == table.end()) {
                throw ConfigError("unknown config key " + where(section, key));
            }
            it->set(value.data());
            cfg.given.insert(section + "." + key);
        }
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config " + file.string());
    return parse_config(is);
}

void write_config(std::ostream& os, const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::string section;
    for (const auto& f : fields(copy)) {
        if (f.section != section) {
            if (!section.empty()) os << '\n';
            section = f.section;
            os << '[' << section << "]\n";
        }
        if (f.section == "train" && !applies(f.key, cfg.train.strategy)) {
            os << "; " << f.key << " = " << f.get() << "  (unused by " << trainer::strategy_name(cfg.train.strategy)
               << ")\n";
        } else {
            os << f.key << " = " << f.get() << '\n';
        }
    }
}

void save_config(const std::filesystem::path& file, const RunConfig& cfg) {
    std::ofstream os(file);
    if (!os) throw std::runtime_error("cannot write " + file.string());
    write_config(os, cfg);
}

void RunConfig::validate() const {
    using trainer::Strategy;
    const Strategy s = train.strategy;
    for (const char* key : {"alpha", "rho_a", "rho_v", "chunk", "beta", "memory"}) {
        if (given.count(std::string("train.") + key) && !applies(key, s)) {
            throw ConfigError(std::string("[train] ") + key + " does not apply to strategy " +
                              trainer::strategy_name(s));
        }
    }

    train.validate();
    try {
        model.validate();
        data.geometry.audio.validate();
        data.geometry.video.validate();
        data::make_class(0, data.seed, data.geometry, data.signature);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    } catch (const data::DataError& e) {
        throw ConfigError(e.what());
    }
    if (model.embed_dim % model.heads != 0) throw ConfigError("embed_dim must be divisible by heads");
    if (data.num_tasks == 0 || data.classes_per_task == 0) throw ConfigError("need at least one task and class");
    if (data.train_per_task < train.batch) throw ConfigError("train_per_task is smaller than one batch");
    if (data.eval_per_task < eval::kRecallKs.back()) {
        throw ConfigError("eval_per_task must be at least " + std::to_string(eval::kRecallKs.back()));
    }
    if (eval_workers == 0) throw ConfigError("[eval] workers must be positive");
}

}  // namespace stella::cli
