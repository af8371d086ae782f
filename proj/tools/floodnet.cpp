// floodnet command-line interface.
//
//   floodnet generate --preset streak --seed 0 --out data/
//   floodnet fit --kind crmp --data data/streak.csv --split 90 --out fits/
//   floodnet predict --model fits/crmp.model.json --data data/streak.csv --range 90:120
//   floodnet compare --preset homogeneous --out cmp/
//   floodnet bench --repeats 5 --out bench/
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include "floodnet/floodnet.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <charconv>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace floodnet;

namespace {

struct Options {
  std::string data;
  std::string out = ".";
  std::string model;
  std::string kind;
  std::string preset;
  std::string spec;
  std::string range;
  std::string gain_constraint = "eq";
  std::vector<std::string> presets;
  long long split = -1;
  int epochs = 500;
  long long window = 10;
  int starts = 8;
  int repeats = 5;
  std::uint64_t seed = 0;
  bool include_press = false;
};

fs::path out_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw DataError("cannot create output directory '" + dir + "'");
  return p;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text_file(path.string(), j.dump(2) + "\n"); }

FitConfig fit_config(const Options& o) {
  FitConfig c;
  c.n_starts = o.starts;
  c.seed = o.seed;
  c.include_press = o.include_press;
  c.gain_constraint = o.gain_constraint == "ineq" ? GainConstraint::inequality : GainConstraint::equality;
  return c;
}

RnnTrainConfig rnn_config(const Options& o) {
  RnnTrainConfig c;
  c.epochs = o.epochs;
  c.window = static_cast<Index>(o.window);
  c.seed = o.seed;
  return c;
}

Index resolve_split(const Options& o, Index n_steps) {
  const Index s = o.split < 0 ? default_split(n_steps) : static_cast<Index>(o.split);
  if (s <= 0 || s >= n_steps) {
    throw UsageError("--split " + std::to_string(s) + " must lie in (0, " + std::to_string(n_steps) + ")");
  }
  return s;
}

Dataset load_data(const Options& o) {
  if (!o.data.empty() && !o.preset.empty()) throw UsageError("pass either --data or --preset, not both");
  if (!o.preset.empty()) {
    const ScenarioSpec spec = preset(o.preset, o.seed);
    return {spec.field, generate(spec)};
  }
  if (o.data.empty()) throw UsageError("--data is required");
  return read_csv(o.data);
}

// ---------------------------------------------------------------------------

int cmd_generate(const Options& o, bool seed_given) {
  if (o.preset.empty() == o.spec.empty()) throw UsageError("generate needs exactly one of --preset or --spec");
  ScenarioSpec spec;
  if (!o.preset.empty()) {
    spec = preset(o.preset, o.seed);
  } else {
    try {
      spec = spec_from_json(nlohmann::json::parse(read_text_file(o.spec)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(o.spec + ": " + e.what());
    }
    if (seed_given) spec.seed = o.seed;
  }
  const RateSeries s = generate(spec);
  const fs::path dir = out_dir(o.out);
  const fs::path csv = dir / (spec.name + ".csv");
  const fs::path json = dir / (spec.name + ".spec.json");
  write_csv(s, spec.field, csv.string());
  write_json(json, spec_to_json(spec));
  std::cout << "wrote " << csv.string() << " and " << json.string() << " (" << s.n_steps() << " steps)\n";
  return 0;
}

template <class Params>
nlohmann::json crm_report_json(const FitReport<Params>& r, const Options& o) {
  nlohmann::json j;
  j["final_loss"] = r.final_loss;
  j["loss_trajectory"] = r.loss_trajectory;
  j["constraint_residual"] = r.constraint_residual;
  j["gain_constraint"] = o.gain_constraint;
  j["include_press"] = r.include_press;
  j["n_starts"] = o.starts;
  j["start_index"] = r.start_index;
  j["start_losses"] = r.start_losses;
  j["iterations"] = r.iterations;
  j["timing"] = {{"wall_time_seconds", r.wall_time}};
  return j;
}

int cmd_fit(const Options& o) {
  const ModelKind kind = parse_model_kind(o.kind);
  const Dataset data = load_data(o);
  const Index split_index = resolve_split(o, data.series.n_steps());
  const RateSeries train = slice(data.series, 0, split_index);

  ModelFile model;
  model.field = data.field;
  nlohmann::json report;
  switch (kind) {
    case ModelKind::crmt: {
      const auto r = fit_crmt(train, data.field, fit_config(o));
      model.payload = r.params;
      report = crm_report_json(r, o);
      break;
    }
    case ModelKind::crmp: {
      const auto r = fit_crmp(train, data.field, fit_config(o));
      model.payload = r.params;
      report = crm_report_json(r, o);
      break;
    }
    case ModelKind::crmip: {
      const auto r = fit_crmip(train, data.field, fit_config(o));
      model.payload = r.params;
      report = crm_report_json(r, o);
      break;
    }
    case ModelKind::rnn: {
      const RnnTrainConfig c = rnn_config(o);
      const RnnFit r = fit_rnn(train, c);
      model.payload = r.model;
      report["final_loss"] = r.final_loss;
      report["loss_trajectory"] = r.loss_trajectory;
      report["epochs"] = c.epochs;
      report["learning_rate"] = c.learning_rate;
      report["momentum"] = c.momentum;
      report["window"] = c.window;
      report["rate_scale"] = r.model.scale;
      report["timing"] = {{"wall_time_seconds", r.wall_time}};
      break;
    }
  }
  report["model_kind"] = to_string(kind);
  report["data"] = o.data.empty() ? "preset:" + o.preset : o.data;
  report["seed"] = o.seed;
  report["split_index"] = split_index;
  report["n_train"] = split_index;

  const fs::path dir = out_dir(o.out);
  const fs::path model_path = dir / (to_string(kind) + ".model.json");
  const fs::path report_path = dir / (to_string(kind) + ".report.json");
  save_model(model, model_path.string());
  write_json(report_path, report);
  std::cout << to_string(kind) << ": final loss " << report["final_loss"].get<double>() << ", wall time "
            << report["timing"]["wall_time_seconds"].get<double>() << " s\n"
            << "wrote " << model_path.string() << " and " << report_path.string() << "\n";
  return 0;
}

std::pair<Index, Index> parse_range(const std::string& text, Index n) {
  if (text.empty()) return {0, n};
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("--range must look like BEGIN:END");
  auto num = [&](std::string_view s, Index fallback) {
    if (s.empty()) return fallback;
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw UsageError("--range: cannot parse '" + std::string(s) + "'");
    }
    return static_cast<Index>(v);
  };
  const std::string_view sv(text);
  const Index b = num(sv.substr(0, colon), 0);
  const Index e = num(sv.substr(colon + 1), n);
  if (b < 0 || e > n) throw UsageError("--range " + text + " outside [0, " + std::to_string(n) + "]");
  if (b >= e) throw UsageError("--range " + text + " is empty");
  return {b, e};
}

int cmd_predict(const Options& o) {
  if (o.model.empty()) throw UsageError("--model is required");
  if (o.data.empty()) throw UsageError("--data is required");
  const ModelFile model = load_model(o.model);
  const Dataset data = read_csv(o.data, model.field);
  const auto [b, e] = parse_range(o.range, data.series.n_steps());

  const auto t0 = std::chrono::steady_clock::now();
  const Matrix pred = predict(model, data.series);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::string out = "step,time";
  if (model.kind() == ModelKind::crmt) {
    out += ",PRD:total";
  } else {
    for (const auto& p : model.field.producers()) out += ",PRD:" + p;
  }
  out += '\n';
  for (Index t = b; t < e; ++t) {
    out += std::to_string(t) + ',' + format_double(data.series.times[t]);
    for (Index j = 0; j < pred.cols(); ++j) out += ',' + format_double(pred(t, j));
    out += '\n';
  }
  if (o.out.empty() || o.out == "-") {
    std::cout << out;
  } else {
    write_text_file(o.out, out);
    std::cerr << "predicted rows " << b << ".." << e - 1 << " in " << secs << " s, wrote " << o.out << "\n";
  }
  return 0;
}

int cmd_compare(const Options& o) {
  const Dataset data = load_data(o);
  const Index split_index = resolve_split(o, data.series.n_steps());
  const CompareConfig config{fit_config(o), rnn_config(o)};
  const std::string source = o.data.empty() ? "preset:" + o.preset : o.data;
  const ComparisonReport r = compare_models(data, split_index, config, source);
  const fs::path dir = out_dir(o.out);
  write_json(dir / "comparison.json", comparison_to_json(r));
  write_text_file((dir / "comparison.csv").string(), comparison_csv(r));
  std::cout << comparison_table(r) << "wrote " << (dir / "comparison.json").string() << " and "
            << (dir / "comparison.csv").string() << "\n";
  return 0;
}

int cmd_bench(const Options& o) {
  const std::vector<std::string> names = o.presets.empty() ? preset_names() : o.presets;
  for (const auto& n : names) preset(n, 0);  // reject unknown names before any work
  const CompareConfig config{fit_config(o), rnn_config(o)};
  const BenchResult b = run_bench(names, o.repeats, o.seed, config);
  const fs::path dir = out_dir(o.out);
  write_json(dir / "bench.json", bench_to_json(b));
  std::cout << bench_table(b) << "wrote " << (dir / "bench.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capacitance-resistance models and a linear RNN for waterflood rate data"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c) { return c->add_option("--seed", o.seed, "Random seed"); };
  auto add_fit_flags = [&](CLI::App* c) {
    c->add_option("--split", o.split, "First test row (default: 3/4 of the rows)");
    c->add_option("--epochs", o.epochs, "RNN training epochs")->check(CLI::PositiveNumber);
    c->add_option("--window", o.window, "RNN lookback window")->check(CLI::NonNegativeNumber);
    c->add_option("--starts", o.starts, "CRM multi-start count")->check(CLI::PositiveNumber);
    c->add_option("--gain-constraint", o.gain_constraint, "Gain row sums: eq (= 1) or ineq (<= 1)")
        ->check(CLI::IsMember({"eq", "ineq"}));
    c->add_flag("--include-press", o.include_press, "Fit the BHP drive term when the data has BHP");
  };

  auto* gen = app.add_subcommand("generate", "Write a synthetic scenario as CSV plus its spec JSON");
  gen->add_option("--preset", o.preset, "Preset name (streak, homogeneous)");
  gen->add_option("--spec", o.spec, "Scenario spec JSON to generate from");
  auto* gen_seed = add_seed(gen);
  gen->add_option("--out", o.out, "Output directory");

  auto* fit = app.add_subcommand("fit", "Fit a model on the training rows");
  fit->add_option("--kind", o.kind, "crmt, crmp, crmip or rnn")->required();
  fit->add_option("--data", o.data, "Data CSV");
  fit->add_option("--preset", o.preset, "Fit on a generated preset instead of --data");
  add_fit_flags(fit);
  add_seed(fit);
  fit->add_option("--out", o.out, "Output directory");

  auto* pred = app.add_subcommand("predict", "Predict production rates with a saved model");
  pred->add_option("--model", o.model, "Model JSON")->required();
  pred->add_option("--data", o.data, "Data CSV")->required();
  pred->add_option("--range", o.range, "Rows BEGIN:END (half-open; default all)");
  pred->add_option("--out", o.out, "Output CSV (default stdout)");

  auto* cmp = app.add_subcommand("compare", "Fit CRMP and the RNN and compare them");
  cmp->add_option("--data", o.data, "Data CSV");
  cmp->add_option("--preset", o.preset, "Compare on a generated preset instead of --data");
  add_fit_flags(cmp);
  add_seed(cmp);
  cmp->add_option("--out", o.out, "Output directory");

  auto* bench = app.add_subcommand("bench", "Median fit and predict wall times on the presets");
  bench->add_option("--preset", o.presets, "Presets to run (default all)");
  bench->add_option("--repeats", o.repeats, "Runs per measurement")->check(CLI::PositiveNumber);
  add_fit_flags(bench);
  add_seed(bench);
  bench->add_option("--out", o.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (pred->parsed() && pred->get_option("--out")->count() == 0) o.out.clear();

  try {
    if (gen->parsed()) return cmd_generate(o, gen_seed->count() > 0);
    if (fit->parsed()) return cmd_fit(o);
    if (pred->parsed()) return cmd_predict(o);
    if (cmp->parsed()) return cmd_compare(o);
    if (bench->parsed()) return cmd_bench(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
