// Command-line driver: gen, trace, sinks (alias mds), decode, eval.
#include <iostream>

#include "CLI11.hpp"
#include "avsink/errors.hpp"
#include "avsink/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace avsink;
  CLI::App app{"avsink: audio-visual attention sink tracing and guided decoding"};
  app.require_subcommand(1, 1);

  std::string config_path, out, guidance;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::vector<int> n;
  std::optional<int> threads;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--out", out, std::string("output directory (default: $") + kOutEnvVar + " or ./out)");
    sub->add_option("--n", n, "global sink divisor(s), comma separated")->delimiter(',');
    sub->add_option("--threads", threads, "worker threads");
  };
  auto* gen = app.add_subcommand("gen", "build the planted model, dataset, captions and vocabulary");
  auto* trace = app.add_subcommand("trace", "activation patching over token subsets");
  auto* sinks = app.add_subcommand("sinks", "sink discovery, MDS and partition for one sample");
  auto* mds = app.add_subcommand("mds", "alias of sinks");
  auto* decode = app.add_subcommand("decode", "caption decoding with a guidance method");
  auto* eval = app.add_subcommand("eval", "CHAIR and F1 over decoded captions");
  for (auto* s : {gen, trace, sinks, mds, decode, eval}) add_common(s);
  decode->add_option("--guidance", guidance, "vanilla | asd | reverse-asd | pai | vcd");
  decode->add_option("--alpha", alpha, "ASD alpha (or PAI alpha with --guidance pai)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (cfg.out.empty()) cfg.out = default_out_dir();
    if (!n.empty()) cfg.sink.n = n;
    if (threads) cfg.threads = *threads;
    if (!guidance.empty()) cfg.guidance.method = guidance;
    if (alpha) {
      if (cfg.guidance.method == "pai")
        cfg.guidance.pai_alpha = *alpha;
      else
        cfg.guidance.asd.alpha = *alpha;
    }
    if (gen->parsed()) cmd_gen(cfg, std::cout);
    else if (trace->parsed()) cmd_trace(cfg, std::cout);
    else if (sinks->parsed() || mds->parsed()) cmd_sinks(cfg, std::cout);
    else if (decode->parsed()) cmd_decode(cfg, std::cout);
    else if (eval->parsed()) cmd_eval(cfg, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const InvariantError& e) {
    std::cerr << "invariant violated: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
