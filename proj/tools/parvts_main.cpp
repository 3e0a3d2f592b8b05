#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "parvts/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Vision-token scheduling lab: toy-model experiments, analytic cost model, verification"};
    app.require_subcommand(1);

    parvts::RunArgs run_args;
    auto* run = app.add_subcommand("run", "Run a seeded experiment and write its report");
    run->add_option("--config", run_args.config_path, "Config file (key = value lines)");
    run->add_option("--set", run_args.overrides, "Override, e.g. schedule.alpha=0 (repeatable)");
    run->add_option("--out", run_args.out_path, "Report path")->capture_default_str();

    parvts::CostArgs cost_args;
    auto* cost = app.add_subcommand("cost", "Evaluate the analytic FLOPs and speedup model");
    cost->add_option("--config", cost_args.config_path, "Config file; its cost.* keys are the base values");
    cost->add_option("--set", cost_args.overrides, "Override, e.g. cost.p=0.5 (repeatable)");
    cost->add_option("--preset", cost_args.preset, "Backbone name, e.g. LLaVA-1.5-7B; sets n");
    cost->add_option("--p", cost_args.p, "Pruning rate");
    cost->add_option("--n", cost_args.n, "Migration depth");
    cost->add_option("--N", cost_args.N, "Layer count");
    cost->add_option("--L", cost_args.L, "Prefill length (must equal L_text + L_img)");
    cost->add_option("--L_text", cost_args.L_text, "System + question tokens");
    cost->add_option("--L_img", cost_args.L_img, "Visual tokens");
    cost->add_option("--M", cost_args.M, "Generated tokens");
    cost->add_option("--d", cost_args.d, "Hidden size");
    cost->add_option("--m", cost_args.m, "FFN intermediate size");

    parvts::SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "Write a CSV of cost-model results over a parameter grid");
    sweep->add_option("--config", sweep_args.config_path, "Config file; its cost.* keys fill unswept axes");
    sweep->add_option("--set", sweep_args.overrides, "Override (repeatable)");
    sweep->add_option("--grid", sweep_args.grid, "Axis spec key=a,b,c or key=start:stop:step (repeatable)");
    sweep->add_option("--out", sweep_args.out_path, "CSV path (default: stdout)");

    parvts::VerifyArgs verify_args;
    std::string fault = "none";
    auto* verify = app.add_subcommand("verify", "Run the oracle and invariant checks");
    verify->add_option("--out", verify_args.out_path, "Also write the check report here");
    verify->add_option("--inject-fault", fault, "Deliberate defect for mutation testing")
        ->check(CLI::IsMember({"none", "ignore-beta"}))
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : parvts::kExitValidation;
    }

    if (*run) return parvts::cmd_run(run_args, std::cout, std::cerr);
    if (*cost) return parvts::cmd_cost(cost_args, std::cout, std::cerr);
    if (*sweep) return parvts::cmd_sweep(sweep_args, std::cout, std::cerr);
    if (fault == "ignore-beta") verify_args.options.fault = parvts::FaultInjection::IgnoreBeta;
    return parvts::cmd_verify(verify_args, std::cout, std::cerr);
}
