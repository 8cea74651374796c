#pragma once

#include <nlohmann/json.hpp>

#include "nht/pairing.hpp"

namespace nht {

/// A parsed scenario configuration (versioned JSON schema; unknown keys are
/// rejected at parse time).
struct ScenarioConfig {
    int schema = 1;

    struct MeasureCfg {
        std::string kind = "uniform";  // uniform | lattice | cantor | mixture | file
        int dim = 1;
        int atoms = 256;
        int per_axis = 16;
        int level = 6;
        double ratio = 0.25;
        double m = 1.0;
        bool random_weights = false;
        int heavy = 4;
        double heavy_mass = 0.5;
        std::string file;
    } measure;

    struct KernelCfg {
        std::string name = "cauchy";  // cauchy | riesz | zero | matrix
        double m = 1.0;
        double alpha = 1.0;
        std::string matrix_file;
    } kernel;

    struct FamilyCfg {
        std::string strategy = "indicator";  // indicator | perturbed | custom
        double eta = 0.25;
        std::string file;
    } family;

    double q0_side = 1.0;
    int depth = 7;
    double lambda = 8.0;
    int beta = 4;
    int r = 3;
    double theta = 0x1p-8;
    double sigma = 0x1p-12;
    double u = 0.125;
    double gamma = -1.0;  // < 0 means derived from the kernel
    int surgery_sample = 48;

    std::vector<std::string> suites = {"all"};
    std::uint64_t seed = 7;
    int trials = 32;
    int prob_trials = 256;
    std::string out_dir;

    static ScenarioConfig from_json(const nlohmann::json& j);
    static ScenarioConfig from_file(const std::string& path);
    nlohmann::json to_json() const;
};

/// A realised instance: the measure, operator and parameters shared by every
/// suite, with the instance-level norms computed once.
struct Scenario {
    ScenarioConfig cfg;
    DiscreteMeasure mu;
    KernelSpec kernel;
    std::unique_ptr<DiscretizedOperator> op;
    FamilyStrategy family;
    Params prm;
    Box q0;
    double op_norm_value = 0.0;
    double op_norm_power = 0.0;
    double maximal_norm = 1.0;
};

Scenario build_scenario(const ScenarioConfig& cfg);

/// The functions f, g with |f|, |g| <= 1_{Q0} used by the pairing suites.
AtomFn bounded_test_function(const Scenario& sc, std::uint64_t stream);

struct SuiteResult {
    std::string name;
    bool pass = false;
    nlohmann::json details;
};

/// Suites exposed through the CLI: verify-kernel, growth, stopping,
/// martingale, mc-goodbad, surgery, pairing. "all" expands to every suite.
SuiteResult run_suite(const std::string& name, Scenario& sc);
std::vector<std::string> expand_suites(const std::vector<std::string>& req);

/// Sweep CSV rows: {suite, seed, instance-params, ratio, ceiling}.
struct SweepRow {
    std::string suite;
    std::uint64_t seed = 0;
    std::string instance;
    double ratio = 0.0;
    double ceiling = 0.0;
};
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

/// Pairing report emission (JSON document plus a CSV summary).
nlohmann::json trial_to_json(const TrialReport& rep);
void write_pairing_report(const std::string& dir, const ScenarioConfig& cfg,
                          const std::vector<TrialReport>& trials);

/// Parallel map over trial indices honouring the NHT_THREADS cap; results are
/// collected in index order so reductions are deterministic.
int thread_cap();
void parallel_trials(int n, const std::function<void(int)>& body);

}  // namespace nht
