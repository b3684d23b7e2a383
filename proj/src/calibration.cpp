#include "exitnet/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>

#include "exitnet/error.hpp"
#include "exitnet/loss.hpp"

namespace exitnet {

void CalibrationSet::validate() const {
  std::size_t k = costs.size();
  if (k < 2) throw ContractError("calibration set: need at least 2 exits");
  if (confidences.empty()) throw ContractError("calibration set: no samples");
  if (correct.size() != confidences.size()) {
    throw ContractError("calibration set: confidence and correctness tables disagree");
  }
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    if (confidences[i].size() != k || correct[i].size() != k) {
      throw ContractError("calibration set: sample " + std::to_string(i) +
                          " does not cover every exit");
    }
  }
  for (std::size_t j = 0; j + 1 < k; ++j) {
    if (!(costs[j] < costs[j + 1])) {
      throw ContractError("calibration set: exit costs must be strictly increasing");
    }
  }
}

namespace {

void check_q(double q) {
  if (!(q > 0.0) || !(q < 1.0)) {
    throw ContractError("exit fractions: q must lie strictly inside (0, 1)");
  }
}

void check_num_exits(std::size_t k) {
  if (k < 2) throw ContractError("exit fractions: need at least 2 exits");
}

}  // namespace

std::vector<double> exit_fractions(double q, std::size_t num_exits) {
  check_q(q);
  check_num_exits(num_exits);
  std::vector<double> p(num_exits);
  double geo = q;
  double total = 0.0;
  for (std::size_t k = 0; k < num_exits; ++k) {
    p[k] = geo;
    total += geo;
    geo *= 1.0 - q;
  }
  for (double& x : p) x /= total;
  return p;
}

std::vector<double> gate_mass(double q, std::size_t num_exits) {
  check_q(q);
  check_num_exits(num_exits);
  std::vector<double> p(num_exits);
  double survive = 1.0;
  for (std::size_t k = 0; k + 1 < num_exits; ++k) {
    p[k] = q * survive;
    survive *= 1.0 - q;
  }
  p[num_exits - 1] = survive;
  return p;
}

double expected_cost(const std::vector<double>& mass, const std::vector<double>& costs) {
  if (mass.size() != costs.size()) {
    throw ContractError("expected cost: mass and costs differ in length");
  }
  double e = 0.0;
  for (std::size_t k = 0; k < mass.size(); ++k) e += mass[k] * costs[k];
  return e;
}

double solve_q(const std::vector<double>& costs, double budget) {
  check_num_exits(costs.size());
  for (std::size_t j = 0; j + 1 < costs.size(); ++j) {
    if (!(costs[j] < costs[j + 1])) {
      throw ContractError("budget solve: exit costs must be strictly increasing");
    }
  }
  if (!std::isfinite(budget) || budget < costs.front() || budget > costs.back()) {
    std::ostringstream msg;
    msg << "budget " << budget << " lies outside the feasible range ["
        << costs.front() << ", " << costs.back() << "]";
    throw BudgetError(msg.str());
  }

  const double tol = 1e-6 * costs.back();
  double lo = 1e-15, hi = 1.0 - 1e-15;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    double e = expected_cost(gate_mass(mid, costs.size()), costs);
    if (std::fabs(e - budget) < tol) return mid;
    if (e > budget) {
      lo = mid;  // cost decreases in q, so push q up
    } else {
      hi = mid;
    }
  }
  throw NumericalError("budget solve did not converge");
}

std::vector<double> thresholds_from_fractions(const CalibrationSet& cal,
                                              const std::vector<double>& fractions) {
  cal.validate();
  const std::size_t k = cal.num_exits();
  const std::size_t n = cal.size();
  if (fractions.size() != k) {
    throw ContractError("thresholds: expected " + std::to_string(k) +
                        " fractions, got " + std::to_string(fractions.size()));
  }
  double total = 0.0;
  for (double p : fractions) {
    if (!std::isfinite(p) || p < 0.0) {
      throw ContractError("thresholds: fractions must be non-negative");
    }
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ContractError("thresholds: fractions must sum to 1");
  }

  std::vector<std::size_t> survivors(n);
  std::iota(survivors.begin(), survivors.end(), 0);
  std::vector<double> theta(k, 0.0);

  for (std::size_t j = 0; j + 1 < k; ++j) {
    auto target = static_cast<std::size_t>(
        std::llround(fractions[j] * static_cast<double>(n)));
    if (target == 0) {
      theta[j] = std::nextafter(1.0, 2.0);  // unreachable, nobody leaves here
      continue;
    }
    if (target > survivors.size()) {
      // not enough samples left: open this and every later gate fully
      for (std::size_t rest = j; rest < k; ++rest) theta[rest] = 0.0;
      survivors.clear();
      break;
    }
    std::vector<double> conf;
    conf.reserve(survivors.size());
    for (std::size_t i : survivors) conf.push_back(cal.confidences[i][j]);
    std::nth_element(conf.begin(), conf.begin() + static_cast<std::ptrdiff_t>(target - 1),
                     conf.end(), std::greater<>());
    theta[j] = conf[target - 1];

    std::erase_if(survivors,
                  [&](std::size_t i) { return cal.confidences[i][j] >= theta[j]; });
  }
  theta[k - 1] = 0.0;
  return theta;
}

CalibrationSet collect_calibration(const Model& m, const Dataset& data,
                                   const FlopsProfile& prof) {
  const auto& exits = m.config().exits;
  if (!(exits[0] && exits[1] && exits[2] && exits[3])) {
    throw ContractError("calibration requires every exit enabled");
  }
  if (data.size() == 0) throw ContractError("calibration: empty dataset");

  const std::size_t n = data.size();
  CalibrationSet cal;
  cal.confidences.assign(n, std::vector<double>(4));
  cal.correct.assign(n, std::vector<char>(4));
  cal.costs.assign(prof.cumulative.begin(), prof.cumulative.end());

  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::size_t stop = std::min(start + chunk, n);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    ForwardOutputs out = full_forward(m, data.batch(idx));
    for (std::size_t k = 0; k < 4; ++k) {
      std::vector<double> conf = row_confidences(*out.logits[k]);
      std::vector<std::size_t> pred = predictions(*out.logits[k]);
      for (std::size_t i = start; i < stop; ++i) {
        cal.confidences[i][k] = conf[i - start];
        cal.correct[i][k] = pred[i - start] == data.labels[i] ? 1 : 0;
      }
    }
  }
  cal.validate();
  return cal;
}

namespace {

// gating replayed on the tabulated confidences
void replay_on_table(const CalibrationSet& cal, const std::vector<double>& theta,
                     double& mean_flops, double& accuracy) {
  const std::size_t k = cal.num_exits();
  double flops_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < cal.size(); ++i) {
    std::size_t taken = k - 1;
    for (std::size_t j = 0; j + 1 < k; ++j) {
      if (cal.confidences[i][j] >= theta[j]) {
        taken = j;
        break;
      }
    }
    flops_sum += cal.costs[taken];
    if (cal.correct[i][taken]) ++correct;
  }
  mean_flops = flops_sum / static_cast<double>(cal.size());
  accuracy = static_cast<double>(correct) / static_cast<double>(cal.size());
}

}  // namespace

std::vector<CurveRow> budget_sweep(const Model& m, const Dataset& cal_data,
                                   const Dataset& eval_data,
                                   const std::vector<double>& budgets,
                                   const FlopsProfile& prof) {
  if (budgets.empty()) throw ContractError("budget sweep: no budgets given");
  CalibrationSet cal = collect_calibration(m, cal_data, prof);

  std::vector<CurveRow> rows;
  rows.reserve(budgets.size());
  for (double budget : budgets) {
    CurveRow row;
    row.budget = budget;
    row.q = solve_q(cal.costs, budget);
    std::vector<double> theta = thresholds_from_fractions(cal, gate_mass(row.q, 4));
    std::copy(theta.begin(), theta.end(), row.thresholds.begin());
    replay_on_table(cal, theta, row.cal_mean_flops, row.cal_accuracy);

    ExitPolicy policy;
    policy.thresholds = row.thresholds;
    EvalSummary s = batch_evaluate(m, eval_data, policy, prof);
    row.mean_flops = s.mean_flops;
    row.accuracy = s.accuracy;
    rows.push_back(row);
  }
  return rows;
}

void write_curve(std::ostream& out, const std::vector<CurveRow>& rows) {
  out << "budget\tq\ttheta_1\ttheta_2\ttheta_3\ttheta_4\tmean_flops\taccuracy\n";
  out << std::setprecision(17);
  for (const CurveRow& r : rows) {
    out << r.budget << '\t' << r.q;
    for (double t : r.thresholds) out << '\t' << t;
    out << '\t' << r.mean_flops << '\t' << r.accuracy << '\n';
  }
}

}  // namespace exitnet
