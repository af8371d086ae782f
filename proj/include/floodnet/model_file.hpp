#pragma once

// Fitted models on disk. One JSON document per model:
//
//   {"format_version": 1, "model_kind": "crmp", "injectors": [...],
//    "producers": [...], "params": {...}, "normalization": {...}}
//
// Doubles are written in shortest round-trip form, so a save/load cycle
// reproduces every parameter bit for bit.

#include "floodnet/core.hpp"
#include "floodnet/crm.hpp"
#include "floodnet/rnn.hpp"
#include "floodnet/scenarios.hpp"

#include "json.hpp"

#include <string>
#include <variant>

namespace floodnet {

inline constexpr int kModelFormatVersion = 1;

enum class ModelKind { crmt, crmp, crmip, rnn };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::crmt: return "crmt";
    case ModelKind::crmp: return "crmp";
    case ModelKind::crmip: return "crmip";
    case ModelKind::rnn: return "rnn";
  }
  return "unknown";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "crmt") return ModelKind::crmt;
  if (s == "crmp") return ModelKind::crmp;
  if (s == "crmip") return ModelKind::crmip;
  if (s == "rnn") return ModelKind::rnn;
  throw UsageError("unknown model kind '" + s + "' (expected crmt, crmp, crmip or rnn)");
}

using ModelPayload = std::variant<CrmtParams, CrmpParams, CrmipParams, RnnModel>;

struct ModelFile {
  WellField field;
  ModelPayload payload;
  int format_version = kModelFormatVersion;

  ModelKind kind() const { return static_cast<ModelKind>(payload.index()); }
};

namespace detail {

inline void check_payload(const ModelFile& m) {
  const Index ni = m.field.n_inj(), np = m.field.n_pro();
  auto fail = [&](const std::string& what) {
    throw DataError(to_string(m.kind()) + " model: " + what + " does not match " + std::to_string(ni) +
                    " injectors x " + std::to_string(np) + " producers");
  };
  auto mat = [&](const Matrix& x, const char* what) {
    if (x.rows() != ni || x.cols() != np) fail(what);
  };
  auto vec = [&](const Vector& x, const char* what) {
    if (x.size() != np) fail(what);
  };
  if (const auto* p = std::get_if<CrmpParams>(&m.payload)) {
    mat(p->gains, "gains");
    vec(p->tau, "tau");
    vec(p->q0, "q0");
    if (p->j_index) vec(*p->j_index, "j_index");
  } else if (const auto* p = std::get_if<CrmipParams>(&m.payload)) {
    mat(p->gains, "gains");
    mat(p->tau, "tau");
    mat(p->q0, "q0");
    if (p->j_index) mat(*p->j_index, "j_index");
  } else if (const auto* p = std::get_if<RnnModel>(&m.payload)) {
    mat(p->params.kernel, "kernel");
    if (p->params.recurrence.rows() != np || p->params.recurrence.cols() != np) fail("recurrence");
    if (!(p->scale > 0.0)) throw DataError("rnn model: normalization scale must be positive");
  }
}

}  // namespace detail

inline nlohmann::json model_to_json(const ModelFile& m) {
  detail::check_payload(m);
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["model_kind"] = to_string(m.kind());
  j["injectors"] = m.field.injectors();
  j["producers"] = m.field.producers();
  nlohmann::json p = nlohmann::json::object();
  nlohmann::json norm = nlohmann::json::object();
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, CrmtParams>) {
          p = {{"tau", x.tau}, {"f_field", x.f_field}, {"q0", x.q0}};
        } else if constexpr (std::is_same_v<T, CrmpParams>) {
          p["tau"] = detail::vector_to_json(x.tau);
          p["gains"] = detail::matrix_to_json(x.gains);
          p["q0"] = detail::vector_to_json(x.q0);
          if (x.j_index) p["j_index"] = detail::vector_to_json(*x.j_index);
        } else if constexpr (std::is_same_v<T, CrmipParams>) {
          p["tau"] = detail::matrix_to_json(x.tau);
          p["gains"] = detail::matrix_to_json(x.gains);
          p["q0"] = detail::matrix_to_json(x.q0);
          if (x.j_index) p["j_index"] = detail::matrix_to_json(*x.j_index);
        } else {
          p["kernel"] = detail::matrix_to_json(x.params.kernel);
          p["recurrence"] = detail::matrix_to_json(x.params.recurrence);
          p["window"] = x.params.window;
          norm["rate_scale"] = x.scale;
        }
      },
      m.payload);
  j["params"] = std::move(p);
  j["normalization"] = std::move(norm);
  return j;
}

inline ModelFile model_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw DataError("unsupported model format version " + std::to_string(version) + " (this build reads " +
                      std::to_string(kModelFormatVersion) + ")");
    }
    ModelFile m;
    m.format_version = version;
    m.field = WellField(j.at("injectors").get<std::vector<std::string>>(),
                        j.at("producers").get<std::vector<std::string>>());
    const auto& p = j.at("params");
    switch (parse_model_kind(j.at("model_kind").get<std::string>())) {
      case ModelKind::crmt:
        m.payload = CrmtParams{p.at("tau").get<double>(), p.at("f_field").get<double>(), p.at("q0").get<double>()};
        break;
      case ModelKind::crmp: {
        auto& x = m.payload.emplace<CrmpParams>();
        x.tau = detail::vector_from_json(p.at("tau"), "tau");
        x.gains = detail::matrix_from_json(p.at("gains"), "gains");
        x.q0 = detail::vector_from_json(p.at("q0"), "q0");
        if (p.contains("j_index")) x.j_index = detail::vector_from_json(p.at("j_index"), "j_index");
        break;
      }
      case ModelKind::crmip: {
        auto& x = m.payload.emplace<CrmipParams>();
        x.tau = detail::matrix_from_json(p.at("tau"), "tau");
        x.gains = detail::matrix_from_json(p.at("gains"), "gains");
        x.q0 = detail::matrix_from_json(p.at("q0"), "q0");
        if (p.contains("j_index")) x.j_index = detail::matrix_from_json(p.at("j_index"), "j_index");
        break;
      }
      case ModelKind::rnn: {
        auto& x = m.payload.emplace<RnnModel>();
        x.params.kernel = detail::matrix_from_json(p.at("kernel"), "kernel");
        x.params.recurrence = detail::matrix_from_json(p.at("recurrence"), "recurrence");
        x.params.window = p.at("window").get<Index>();
        x.scale = j.at("normalization").at("rate_scale").get<double>();
        break;
      }
    }
    detail::check_payload(m);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
}

inline std::string model_text(const ModelFile& m) { return model_to_json(m).dump(2) + "\n"; }

inline void save_model(const ModelFile& m, const std::string& path) { write_text_file(path, model_text(m)); }

/// Parses a model document. Malformed or truncated text raises DataError
/// naming the byte position; nothing is returned partially.
inline ModelFile parse_model(const std::string& text, const std::string& source = "<model>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(source + ": " + e.what());
  }
  try {
    return model_from_json(j);
  } catch (const DataError& e) {
    throw DataError(source + ": " + e.what());
  }
}

inline ModelFile load_model(const std::string& path) { return parse_model(read_text_file(path), path); }

/// Predictions over every row of `series`. CRMT returns a single column (the
/// field total); the other kinds return one column per producer.
inline Matrix predict(const ModelFile& m, const RateSeries& series) {
  validate(series, m.field);
  return std::visit(
      [&](const auto& x) -> Matrix {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, CrmtParams>) {
          return Matrix(crmt_predict(x, series));
        } else if constexpr (std::is_same_v<T, RnnModel>) {
          return rnn_predict(x, series.injection);
        } else {
          if (x.j_index && !series.bhp) throw DataError("model has a BHP drive term but the data has no BHP columns");
          if constexpr (std::is_same_v<T, CrmpParams>) {
            return crmp_predict(x, series);
          } else {
            return crmip_predict(x, series).totals;
          }
        }
      },
      m.payload);
}

}  // namespace floodnet
