#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "crfuse/train.hpp"

namespace crfuse {

// metrics as a JSON document (WA/UA, per-class recalls, agreement, supports)
std::string eval_report_json(const EvalReport& report);
void write_eval_report(const std::filesystem::path& path, const EvalReport& report);

// raw counts followed by row-normalized rates, one CSV
void write_confusion_csv(const std::filesystem::path& path, const EvalReport& report);

// epoch, train_loss, l1, l2, val_wa, val_ua
void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<EpochStats>& curve);

std::string grid_result_json(const GridResult& grid);
void write_grid_json(const std::filesystem::path& path, const GridResult& grid);
void write_grid_csv(const std::filesystem::path& path, const GridResult& grid);

}  // namespace crfuse
