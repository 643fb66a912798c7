#include "chopgrad/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "chopgrad/tensor.hpp"

namespace chopgrad {

CsvWriter::CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

std::string CsvWriter::escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string q = "\"";
  for (char c : field) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

CsvWriter& CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) {
    throw Error("csv row has " + std::to_string(fields.size()) + " fields, header has " + std::to_string(columns_));
  }
  for (std::size_t k = 0; k < fields.size(); ++k) {
    if (k) out_ += ',';
    out_ += escape(fields[k]);
  }
  out_ += '\n';
  return *this;
}

void CsvWriter::save(const std::filesystem::path& path) const { write_text(path, out_); }

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string tick_label(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

}  // namespace

std::string SvgChart::render(int width, int height) const {
  const double left = 70, right = 150, top = 40, bottom = 50;
  const double pw = width - left - right, ph = height - top - bottom;
  const auto ty = [&](double y) { return log_y ? std::log10(std::max(y, 1e-300)) : y; };

  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const SvgSeries& s : series) {
    for (double x : s.x) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
    }
    for (double y : s.y) {
      if (log_y && y <= 0.0) continue;
      y0 = std::min(y0, ty(y));
      y1 = std::max(y1, ty(y));
    }
  }
  for (const SvgReference& r : references) {
    y0 = std::min(y0, ty(r.y));
    y1 = std::max(y1, ty(r.y));
  }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  if (!log_y && y0 > 0) y0 = 0;
  const double pad = 0.05 * (y1 - y0);
  y1 += pad;
  if (log_y) y0 -= pad;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  const auto py = [&](double y) { return top + ph - (ty(y) - y0) / (y1 - y0) * ph; };
  const auto pyt = [&](double t) { return top + ph - (t - y0) / (y1 - y0) * ph; };

  std::ostringstream o;
  o.precision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, tv = y0 + (y1 - y0) * k / 4.0;
    o << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << tick_label(xv)
      << "</text>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << pyt(tv) + 4 << "\" text-anchor=\"end\">"
      << tick_label(log_y ? std::pow(10.0, tv) : tv) << "</text>\n";
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << pyt(tv) << "\" y2=\"" << pyt(tv)
      << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\">"
    << xml_escape(x_label) << "</text>\n";
  o << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(y_label) << (log_y ? " (log)" : "") << "</text>\n";

  std::size_t legend = 0;
  const auto legend_entry = [&](const std::string& name, const char* color, bool dashed) {
    const double ly = top + 10 + 18.0 * static_cast<double>(legend++);
    o << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"" << (dashed ? " stroke-dasharray=\"6,4\"" : "")
      << "/>\n";
    o << "<text x=\"" << left + pw + 36 << "\" y=\"" << ly + 4 << "\">" << xml_escape(name) << "</text>\n";
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const SvgSeries& s = series[k];
    const char* color = kPalette[k % 6];
    std::ostringstream pts;
    pts.precision(6);
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (log_y && s.y[i] <= 0.0) continue;
      pts << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    if (!s.scatter) {
      o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts.str()
        << "\"/>\n";
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (log_y && s.y[i] <= 0.0) continue;
      o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    legend_entry(s.name, color, false);
  }
  for (const SvgReference& r : references) {
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << py(r.y) << "\" y2=\"" << py(r.y)
      << "\" stroke=\"black\" stroke-width=\"1.5\" stroke-dasharray=\"6,4\"/>\n";
    legend_entry(r.name, "black", true);
  }
  o << "</svg>\n";
  return o.str();
}

void SvgChart::save(const std::filesystem::path& path) const { write_text(path, render()); }

std::string SvgHeatmap::render(int cell) const {
  if (values.size() != rows * cols) throw std::invalid_argument("heatmap values do not match rows x cols");
  double lo = 1e300, hi = 0.0;
  for (double v : values) {
    if (v > 0.0) lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const auto shade = [&](double v) {
    if (v <= 0.0 || hi <= 0.0) return 0.0;
    if (!log_scale || lo >= hi) return v / hi;
    return 0.15 + 0.85 * (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo));
  };
  const int top = 40, left = 10;
  const int width = left * 2 + cell * static_cast<int>(cols), height = top + cell * static_cast<int>(rows) + 40;
  std::ostringstream o;
  o.precision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << std::max(width, 320) << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double t = shade(values[r * cols + c]);
      const int level = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      o << "<rect x=\"" << left + cell * static_cast<int>(c) << "\" y=\"" << top + cell * static_cast<int>(r)
        << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(255," << level << "," << level << ")\"";
      if (!outline.empty() && outline[r * cols + c]) o << " stroke=\"#1f77b4\" stroke-width=\"1\"";
      o << "/>\n";
    }
  o << "<text x=\"" << left << "\" y=\"" << height - 14 << "\">max " << tick_label(hi)
    << (outline_label.empty() ? "" : "; outlined: " + xml_escape(outline_label)) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

void SvgHeatmap::save(const std::filesystem::path& path) const { write_text(path, render()); }

}  // namespace chopgrad
