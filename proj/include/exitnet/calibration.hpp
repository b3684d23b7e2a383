#pragma once

#include <array>
#include <cstddef>
#include <ostream>
#include <vector>

#include "exitnet/data.hpp"
#include "exitnet/exit_engine.hpp"
#include "exitnet/flops.hpp"
#include "exitnet/model.hpp"

namespace exitnet {

// Per-sample confidence and correctness at every exit, plus the exit costs.
// Threshold solving needs nothing else from the model, so calibration over a
// held-out split is a pure computation on this table.
struct CalibrationSet {
  std::vector<std::vector<double>> confidences;  // [N][K]
  std::vector<std::vector<char>> correct;        // [N][K]
  std::vector<double> costs;                     // strictly increasing, size K

  std::size_t size() const { return confidences.size(); }
  std::size_t num_exits() const { return costs.size(); }
  void validate() const;
};

// Fraction of samples expected to leave at each exit when every early gate
// fires independently with probability q, renormalized to the K-exit horizon:
// p_k = q(1-q)^{k-1} / sum_j q(1-q)^{j-1}.
std::vector<double> exit_fractions(double q, std::size_t num_exits);

// Same family without the renormalization: the final exit absorbs all
// survivors, p_K = (1-q)^{K-1}, so the masses sum to one exactly and the
// q -> 0 limit parks everything at the last exit. The budget solver uses this
// form because its expected cost sweeps the full [C_1, C_K] range.
std::vector<double> gate_mass(double q, std::size_t num_exits);

double expected_cost(const std::vector<double>& mass, const std::vector<double>& costs);

// Bisects q so that the gate_mass expected cost meets the budget within
// 1e-6 * C_K. Expected cost is continuous and strictly decreasing in q, so
// the root is unique.
double solve_q(const std::vector<double>& costs, double budget);

// Turns target exit fractions into confidence gates on the calibration set:
// sequentially, t_k = round(p_k * N) highest-confidence survivors leave at
// exit k, and theta_k is the t_k-th largest confidence among them. t_k = 0
// makes the gate unreachable (one ulp above 1); t_k exceeding the survivor
// pool opens this and every later gate fully. The last gate is always 0.
std::vector<double> thresholds_from_fractions(const CalibrationSet& cal,
                                              const std::vector<double>& fractions);

// Tabulates every exit's confidence and correctness over a dataset in
// batches. Requires all four exits enabled so the table is complete.
CalibrationSet collect_calibration(const Model& m, const Dataset& data,
                                   const FlopsProfile& prof);

struct CurveRow {
  double budget = 0.0;
  double q = 0.0;
  std::array<double, 4> thresholds{};
  double cal_mean_flops = 0.0;  // replayed on the calibration table
  double cal_accuracy = 0.0;
  double mean_flops = 0.0;  // measured by gated inference on the eval set
  double accuracy = 0.0;
};

// For each budget: solve q, derive fractions, fit thresholds on the
// calibration split, then evaluate the gated model on the eval split.
std::vector<CurveRow> budget_sweep(const Model& m, const Dataset& cal_data,
                                   const Dataset& eval_data,
                                   const std::vector<double>& budgets,
                                   const FlopsProfile& prof);

// Tab-separated curve: budget, q, theta_1..theta_4, mean_flops, accuracy.
void write_curve(std::ostream& out, const std::vector<CurveRow>& rows);

}  // namespace exitnet
