#include "mx/train.hpp"

#include <fstream>
#include <sstream>

namespace mx {

Strategy strategy_from_string(const std::string& s) {
  if (s == "coop" || s == "cooperative") return Strategy::cooperative;
  if (s == "branches_only" || s == "bo") return Strategy::branches_only;
  if (s == "stage_wise" || s == "sw") return Strategy::stage_wise;
  fail("unknown strategy '" + s + "' (expected coop, branches_only or stage_wise)");
}

TeacherKind teacher_from_string(const std::string& s) {
  if (s == "none") return TeacherKind::none;
  if (s == "dk") return TeacherKind::dk;
  if (s == "ofa") return TeacherKind::ofa;
  if (s == "med") return TeacherKind::med;
  if (s == "wed") return TeacherKind::wed;
  fail("unknown teacher '" + s + "' (expected none, dk, ofa, med or wed)");
}

const char* strategy_str(Strategy s) {
  switch (s) {
    case Strategy::cooperative: return "coop";
    case Strategy::branches_only: return "branches_only";
    default: return "stage_wise";
  }
}

const char* teacher_str(TeacherKind t) {
  switch (t) {
    case TeacherKind::none: return "none";
    case TeacherKind::dk: return "dk";
    case TeacherKind::ofa: return "ofa";
    case TeacherKind::med: return "med";
    default: return "wed";
  }
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  os << "epochs=" << epochs << "\n"
     << "batch_size=" << batch_size << "\n"
     << "lr_initial=" << lr_initial << "\n"
     << "momentum=" << momentum << "\n"
     << "weight_decay=" << weight_decay << "\n"
     << "lambda=" << lambda << "\n"
     << "tau=" << tau << "\n"
     << "strategy=" << strategy_str(strategy) << "\n"
     << "teacher=" << teacher_str(teacher) << "\n"
     << "dk_checkpoint=" << dk_checkpoint << "\n"
     << "kl_direction=" << (kl_teacher_ref ? "teacher_ref" : "student_ref") << "\n"
     << "augment_flip=" << (augment_flip ? 1 : 0) << "\n"
     << "seed=" << seed << "\n";
  return os.str();
}

std::uint64_t TrainConfig::digest() const { return fnv1a64(canonical_text()); }

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  fail("config: bad boolean '" + v + "' for key '" + key + "'");
}

}  // namespace

TrainConfig parse_config_text(const std::string& text, TrainConfig base) {
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto b2 = s.find_first_not_of(" \t");
      const auto e2 = s.find_last_not_of(" \t");
      s = b2 == std::string::npos ? "" : s.substr(b2, e2 - b2 + 1);
    };
    trim(key);
    trim(val);
    try {
      if (key == "epochs") base.epochs = std::stoi(val);
      else if (key == "batch_size") base.batch_size = std::stoi(val);
      else if (key == "lr_initial") base.lr_initial = std::stod(val);
      else if (key == "momentum") base.momentum = std::stod(val);
      else if (key == "weight_decay") base.weight_decay = std::stod(val);
      else if (key == "lambda") base.lambda = std::stod(val);
      else if (key == "tau") base.tau = std::stod(val);
      else if (key == "strategy") base.strategy = strategy_from_string(val);
      else if (key == "teacher") base.teacher = teacher_from_string(val);
      else if (key == "dk_checkpoint") base.dk_checkpoint = val;
      else if (key == "kl_direction") {
        if (val == "teacher_ref") base.kl_teacher_ref = true;
        else if (val == "student_ref") base.kl_teacher_ref = false;
        else fail("config: kl_direction must be teacher_ref or student_ref");
      }
      else if (key == "augment_flip") base.augment_flip = parse_bool(val, key);
      else if (key == "seed") base.seed = static_cast<unsigned>(std::stoul(val));
      else fail("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    } catch (const std::invalid_argument& ex) {
      if (std::string(ex.what()).rfind("config", 0) == 0 || std::string(ex.what()).rfind("unknown", 0) == 0)
        throw;
      fail("config line " + std::to_string(lineno) + ": bad value '" + val + "' for key '" + key + "'");
    }
  }
  return base;
}

TrainConfig load_config_file(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str(), base);
}

std::vector<double> wed_weights(int num_exits) {
  require(num_exits >= 1, "wed_weights: need at least one exit");
  const double denom = static_cast<double>(num_exits) * (num_exits + 1) / 2.0;
  std::vector<double> w;
  for (int j = 1; j <= num_exits; ++j) w.push_back(static_cast<double>(j) / denom);
  return w;
}

std::vector<std::string> metrics_csv_header(int num_exits) {
  std::vector<std::string> h{"epoch", "phase", "lr", "loss"};
  for (int m = 1; m <= num_exits; ++m) h.push_back("train_acc_exit" + std::to_string(m));
  for (int m = 1; m <= num_exits; ++m) h.push_back("eval_acc_exit" + std::to_string(m));
  h.push_back("teacher_acc");
  return h;
}

std::vector<std::vector<std::string>> metrics_csv_rows(const std::vector<EpochMetrics>& metrics) {
  std::vector<std::vector<std::string>> rows;
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  std::size_t exits = 0;
  for (const auto& m : metrics) exits = std::max(exits, m.eval_accuracy.size());
  for (const auto& m : metrics) {
    std::vector<std::string> row{std::to_string(m.epoch), m.phase, num(m.lr), num(m.loss)};
    for (std::size_t i = 0; i < exits; ++i)
      row.push_back(i < m.train_accuracy.size() ? num(m.train_accuracy[i]) : "");
    for (std::size_t i = 0; i < exits; ++i)
      row.push_back(i < m.eval_accuracy.size() ? num(m.eval_accuracy[i]) : "");
    row.push_back(m.teacher_accuracy ? num(*m.teacher_accuracy) : "");
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mx
