#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "precofact/errors.hpp"
#include "precofact/model.hpp"
#include "precofact/training.hpp"

namespace precofact::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitOther = 1;
inline constexpr int kExitMissingInput = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitDataContract = 4;
inline constexpr int kExitFlagContract = 5;

class FlagError : public Error {
public:
    explicit FlagError(const std::string& detail) : Error("flag", detail) {}
};

// JSON run configuration with sections "model", "train" and "paths"
// (train_data, val_data, out_dir). Unknown keys are rejected; absent keys
// keep their defaults.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::optional<std::filesystem::path> train_data;
    std::optional<std::filesystem::path> val_data;
    std::optional<std::filesystem::path> out_dir;
    // Whether the model section set the input widths; otherwise they are
    // taken from the training data header.
    bool text_width_given = false;
    bool image_width_given = false;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig read_run_config(const std::filesystem::path& path);

int exit_code_for(const Error& e);

// Worker count: hardware concurrency capped by PRECOFACT_THREADS.
std::size_t worker_threads();

// Full command line including argv[0]. Results go to `out`, diagnostics
// to `err` as "error: <category>: <detail>".
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace precofact::cli
