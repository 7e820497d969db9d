// Command-line front end: gen-data, train, decode, eval, quantize, selftest.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "streamduct/checkpoint.hpp"
#include "streamduct/config.hpp"
#include "streamduct/decoder.hpp"
#include "streamduct/metrics.hpp"
#include "streamduct/model.hpp"
#include "streamduct/selftest.hpp"
#include "streamduct/synthdata.hpp"
#include "streamduct/trainer.hpp"

namespace sd = streamduct;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t c = std::min(s.find(',', start), s.size());
    if (c > start) out.push_back(s.substr(start, c - start));
    start = c + 1;
  }
  return out;
}

int gen_data(const std::string& config, std::size_t count, const std::string& lang, std::uint64_t seed,
             const std::string& out) {
  const sd::TrainConfig cfg = sd::load_config(config);
  const sd::SynthTask task(cfg.task());
  sd::write_dataset(task.generate(count, sd::parse_language(lang), seed), out);
  std::cerr << "wrote " << count << " " << lang << " examples to " << out << "\n";
  return 0;
}

int train(const std::string& config, const std::string& data, const std::string& out, const std::string& init,
          const std::string& log_path, bool verbose) {
  const sd::TrainConfig cfg = sd::load_config(config);
  std::vector<std::vector<sd::ParallelExample>> sets;
  for (const std::string& p : split_commas(data)) sets.push_back(sd::read_dataset(p));
  sd::TrainOptions opts;
  if (!init.empty()) opts.init_encoder = init;
  if (verbose) opts.progress = &std::cerr;
  const sd::TrainResult r = sd::train(cfg, sets, opts);
  sd::save_checkpoint(r.model, out);
  if (!log_path.empty()) {
    std::ofstream log(log_path);
    log << "step\tlang\tloss\tgrad_norm\tencoder_grad_norm\n";
    log.precision(10);
    for (const auto& s : r.log.steps) {
      log << s.step << '\t' << sd::language_name(s.language) << '\t' << s.loss << '\t' << s.grad_norm << '\t'
          << s.encoder_grad_norm << '\n';
    }
  }
  std::cerr << "trained " << r.log.steps.size() << " steps in " << r.log.wall_seconds << " s; checkpoint " << out
            << "\n";
  if (r.diverged) {
    std::cerr << "training diverged: " << r.diagnostic << "\n";
    return 3;
  }
  return 0;
}

int decode(const std::string& ckpt, const std::string& data, const std::string& lang, const std::string& out) {
  const sd::Model m = sd::load_checkpoint(ckpt);
  const auto examples = sd::read_dataset(data);
  const auto hyps = sd::decode_dataset(m, sd::parse_language(lang), examples);
  sd::write_hypotheses(hyps, out);
  std::size_t truncated = 0;
  for (const auto& h : hyps) truncated += h.truncated;
  std::cerr << "decoded " << hyps.size() << " utterances (" << truncated << " truncated) to " << out << "\n";
  return 0;
}

int eval(const std::string& hyp_list, const std::string& ref, const std::string& label_list) {
  const auto refs_ds = sd::read_dataset(ref);
  std::vector<sd::TokenSequence> refs;
  for (const auto& ex : refs_ds) refs.push_back(ex.target);
  const auto hyp_paths = split_commas(hyp_list);
  const auto labels = split_commas(label_list);
  if (!labels.empty() && labels.size() != hyp_paths.size()) {
    std::cerr << "error: --labels needs one label per hypothesis file\n";
    return 1;
  }
  std::vector<sd::EvalRow> rows;
  for (std::size_t i = 0; i < hyp_paths.size(); ++i) {
    std::string label;
    if (!labels.empty()) {
      label = labels[i];
    } else if (hyp_paths.size() == 1 && !refs_ds.empty()) {
      label = std::string(sd::language_name(refs_ds.front().language));
    } else {
      label = std::filesystem::path(hyp_paths[i]).stem().string();
    }
    rows.push_back(sd::evaluate(label, sd::read_hypotheses(hyp_paths[i]), refs));
  }
  std::cout << sd::format_report(rows);
  return 0;
}

int quantize(const std::string& in, const std::string& out) {
  const auto [m, report] = sd::quantize_encoder(sd::load_checkpoint(in));
  sd::save_checkpoint(m, out);
  bool ok = true;
  std::printf("%-36s %12s %12s\n", "tensor", "scale", "max_error");
  for (const auto& t : report.tensors) {
    std::printf("%-36s %12.4g %12.4g\n", t.name.c_str(), t.scale, t.max_error);
    ok = ok && t.max_error <= t.scale / 2.0 * (1.0 + 1e-9) + 1e-15;
  }
  std::printf("max reconstruction error %.4g\n", report.max_error());
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming transducer translation toolkit"};
  app.require_subcommand(1);

  std::string config, out, lang, data, ckpt, init, hyp, ref, labels, log_path;
  std::size_t count = 0;
  std::uint64_t seed = 1;
  bool verbose = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic parallel dataset");
  gen->add_option("--config", config, "Config file")->required();
  gen->add_option("--count", count, "Number of examples")->required();
  gen->add_option("--lang", lang, "MONO or REORDER")->required();
  gen->add_option("--seed", seed, "Base seed for example seeds");
  gen->add_option("--out", out, "Dataset path")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Config file")->required();
  tr->add_option("--data", data, "Dataset path, or two comma-separated paths for two branches")->required();
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--init-encoder", init, "Checkpoint to take the encoder from");
  tr->add_option("--log", log_path, "Per-step loss log (TSV)");
  tr->add_flag("--verbose", verbose, "Print progress");

  auto* dec = app.add_subcommand("decode", "Greedy streaming decode");
  dec->add_option("--ckpt", ckpt, "Checkpoint")->required();
  dec->add_option("--data", data, "Dataset path")->required();
  dec->add_option("--lang", lang, "Branch to decode with")->required();
  dec->add_option("--out", out, "Hypothesis file")->required();

  auto* ev = app.add_subcommand("eval", "Score hypotheses against references");
  ev->add_option("--hyp", hyp, "Hypothesis file(s), comma-separated")->required();
  ev->add_option("--ref", ref, "Reference dataset")->required();
  ev->add_option("--labels", labels, "Row labels, comma-separated");

  auto* qu = app.add_subcommand("quantize", "8-bit encoder quantization");
  qu->add_option("--ckpt", ckpt, "Input checkpoint")->required();
  qu->add_option("--out", out, "Output checkpoint")->required();

  auto* st = app.add_subcommand("selftest", "Run the built-in checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return gen_data(config, count, lang, seed, out);
    if (tr->parsed()) return train(config, data, out, init, log_path, verbose);
    if (dec->parsed()) return decode(ckpt, data, lang, out);
    if (ev->parsed()) return eval(hyp, ref, labels);
    if (qu->parsed()) return quantize(ckpt, out);
    if (st->parsed()) return sd::report(std::cout, sd::run_selftest()) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
