#pragma once

#include <filesystem>
#include <iosfwd>
#include <set>
#include <string>

#include "stella/trainer/trainer.hpp"

namespace stella::cli {

using trainer::ConfigError;

/// Every knob of a run, grouped as in the config file sections
/// [data], [model], [train] and [eval].
struct RunConfig {
    data::DataConfig data;
    backbone::BackboneConfig model;
    trainer::TrainConfig train;
    std::size_t eval_workers = 1;

    /// "section.key" of every key present in the parsed file.
    std::set<std::string> given;

    /// Range checks plus strategy applicability: a key that the chosen
    /// strategy ignores (alpha for ER, rho for DER++, ...) is an error.
    void validate() const;
};

/// Unknown sections or keys and malformed values raise ConfigError; missing
/// keys keep their defaults. Does not validate.
RunConfig parse_config(std::istream& is);
RunConfig load_config(const std::filesystem::path& file);

/// Resolved config: every key with its effective value.
void write_config(std::ostream& os, const RunConfig& cfg);
void save_config(const std::filesystem::path& file, const RunConfig& cfg);

}  // namespace stella::cli
