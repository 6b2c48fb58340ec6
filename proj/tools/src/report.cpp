#include "vitscope/cli/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vitscope/checkpoint.hpp"

namespace vitscope::cli {

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  if (v == 0.0) v = 0.0;  // drop the sign of -0
  char buf[512];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  if (r.ec != std::errc()) throw std::runtime_error("fixed: value out of range");
  std::string s(buf, r.ptr);
  if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

CsvTable& CsvTable::row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw std::invalid_argument("CsvTable: row has " + std::to_string(cells.size()) +
                                " cells, header has " + std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
  return *this;
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

namespace {

const char* const kPalette[] = {"#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::vector<Series>& series, double y_min, double y_max) {
  const double w = 480, h = 320, left = 56, right = 130, top = 36, bottom = 44;
  const double pw = w - left - right, ph = h - top - bottom;
  std::size_t n = 0;
  for (const auto& s : series) n = std::max(n, s.values.size());
  const double span = y_max > y_min ? y_max - y_min : 1.0;
  auto px = [&](std::size_t i) { return left + (n > 1 ? pw * i / double(n - 1) : pw / 2); };
  auto py = [&](double v) {
    return top + ph * (1.0 - (std::clamp(v, y_min, y_max) - y_min) / span);
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n"
    << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = y_min + span * k / 4.0;
    o << "<text x=\"" << left - 6 << "\" y=\"" << fixed(py(v) + 4, 1)
      << "\" text-anchor=\"end\">" << fixed(v, 2) << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    o << "<text x=\"" << fixed(px(i), 1) << "\" y=\"" << top + ph + 16
      << "\" text-anchor=\"middle\">" << i << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">"
    << escape(x_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % std::size(kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      const double v = series[s].values[i];
      if (std::isnan(v)) continue;
      if (!pts.empty()) pts += ' ';
      pts += fixed(px(i), 1) + "," + fixed(py(v), 1);
    }
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
      << pts << "\"/>\n";
    const double ly = top + 12 + 16.0 * static_cast<double>(s);
    o << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 28
      << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << left + pw + 32 << "\" y=\"" << ly << "\">" << escape(series[s].name)
      << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string heatmap_svg(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<double>& values, double mark) {
  const std::size_t rows = row_labels.size(), cols = col_labels.size();
  if (values.size() != rows * cols) throw std::invalid_argument("heatmap_svg: size mismatch");
  const double cell = 22, left = 60, top = 36;
  const double w = left + cell * cols + 20, h = top + cell * rows + 70;
  double hi = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) hi = std::max(hi, v);
  }
  if (hi <= 0.0) hi = 1.0;

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    const double y = top + cell * r;
    o << "<text x=\"" << left - 6 << "\" y=\"" << y + cell * 0.65 << "\" text-anchor=\"end\">"
      << escape(row_labels[r]) << "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = values[r * cols + c];
      const double a = std::isfinite(v) ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
      const double x = left + cell * c;
      o << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\""
        << cell << "\" fill=\"#d1495b\" fill-opacity=\"" << fixed(a, 3)
        << "\" stroke=\"#ddd\"/>\n";
      if (v > mark) {
        o << "<circle cx=\"" << x + cell / 2 << "\" cy=\"" << y + cell / 2
          << "\" r=\"3\" fill=\"black\"/>\n";
      }
    }
  }
  for (std::size_t c = 0; c < cols; ++c) {
    const double x = left + cell * c + cell / 2, y = top + cell * rows + 8;
    o << "<text x=\"" << x << "\" y=\"" << y << "\" transform=\"rotate(60 " << x << ' ' << y
      << ")\">" << escape(col_labels[c]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

void write_manifest(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.txt") files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& rel : files) {
    const std::string bytes = read_file(dir / rel);
    out += git_blob_hash(bytes) + ' ' + std::to_string(bytes.size()) + ' ' + rel + '\n';
  }
  write_file(dir / "manifest.txt", out);
}

}  // namespace vitscope::cli
