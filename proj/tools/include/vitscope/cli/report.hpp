#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace vitscope::cli {

/// Fixed-point with `digits` decimals; "nan" for NaN. Locale independent.
std::string fixed(double v, int digits = 6);

/// Comma-separated table with a header row. Cells are written verbatim.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  CsvTable& row(std::vector<std::string> cells);
  std::string str() const;
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

struct Series {
  std::string name;
  std::vector<double> values;
};

/// Line chart over x = 0..n-1 with the y axis fixed to [y_min, y_max].
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::vector<Series>& series, double y_min = 0.0,
                           double y_max = 1.0);

/// Row-major heatmap; cells above `mark` get a dot.
std::string heatmap_svg(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<double>& values, double mark);

/// Rewrites `dir/manifest.txt`: one "hash size path" line per regular file
/// under `dir`, sorted by relative path, the manifest itself excluded.
void write_manifest(const std::filesystem::path& dir);

}  // namespace vitscope::cli
