#include "crfuse/reports.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "crfuse/errors.hpp"

namespace crfuse {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

}  // namespace

std::string eval_report_json(const EvalReport& report) {
  nlohmann::json j{{"wa", report.wa},
                   {"ua", report.ua},
                   {"total", report.total},
                   {"modality_agreement", report.modality_agreement},
                   {"per_class_recall", report.per_class_recall},
                   {"class_support", report.class_support},
                   {"confusion", report.confusion}};
  return j.dump(2);
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  auto out = open_out(path);
  out << eval_report_json(report) << "\n";
}

void write_confusion_csv(const std::filesystem::path& path, const EvalReport& report) {
  auto out = open_out(path);
  const size_t classes = report.confusion.size();
  out << "section,true_class";
  for (size_t c = 0; c < classes; ++c) out << ",pred_" << c;
  out << "\n";
  for (size_t r = 0; r < classes; ++r) {
    out << "counts," << r;
    for (size_t c = 0; c < classes; ++c) out << "," << report.confusion[r][c];
    out << "\n";
  }
  out << std::setprecision(17);
  for (size_t r = 0; r < classes; ++r) {
    out << "rates," << r;
    for (size_t c = 0; c < classes; ++c) out << "," << report.confusion_rates[r][c];
    out << "\n";
  }
}

void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<EpochStats>& curve) {
  auto out = open_out(path);
  out << "epoch,train_loss,l1,l2,val_wa,val_ua\n" << std::setprecision(17);
  for (size_t e = 0; e < curve.size(); ++e)
    out << e << "," << curve[e].train_loss << "," << curve[e].l1 << "," << curve[e].l2 << ","
        << curve[e].val_wa << "," << curve[e].val_ua << "\n";
}

std::string grid_result_json(const GridResult& grid) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : grid.points)
    points.push_back(nlohmann::json{{"alpha", p.alpha},
                                    {"failed", p.failed},
                                    {"mean_val_ua", p.mean_val_ua},
                                    {"mean_val_wa", p.mean_val_wa},
                                    {"fold_val_ua", p.fold_val_ua}});
  nlohmann::json j{{"points", points}, {"selected_alpha", grid.selected_alpha}};
  return j.dump(2);
}

void write_grid_json(const std::filesystem::path& path, const GridResult& grid) {
  auto out = open_out(path);
  out << grid_result_json(grid) << "\n";
}

void write_grid_csv(const std::filesystem::path& path, const GridResult& grid) {
  auto out = open_out(path);
  out << "alpha,failed,mean_val_ua,mean_val_wa,selected\n" << std::setprecision(17);
  for (size_t i = 0; i < grid.points.size(); ++i) {
    const auto& p = grid.points[i];
    out << p.alpha << "," << (p.failed ? 1 : 0) << "," << p.mean_val_ua << "," << p.mean_val_wa
        << "," << (static_cast<int>(i) == grid.selected_index ? 1 : 0) << "\n";
  }
}

}  // namespace crfuse
