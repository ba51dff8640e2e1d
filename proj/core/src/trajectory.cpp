#include "utrack/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace utrack {

void append_trajectory_rows(const Environment& env, double reward, bool collision,
                            std::vector<TrajectoryRow>& rows) {
  const WorldState& w = env.world();
  const StepOutput& out = env.last_output();
  const int step = w.step;

  for (std::size_t a = 0; a < w.agents.size(); ++a) {
    const VehicleState& v = w.agents[a];
    TrajectoryRow r;
    r.step = step;
    r.entity_id = "agent_" + std::to_string(a);
    r.kind = "agent";
    r.x = v.position.x();
    r.y = v.position.y();
    r.z = v.position.z();
    r.heading = v.heading;
    r.reward = reward;
    r.collision = collision ? 1 : 0;
    rows.push_back(std::move(r));
  }

  for (std::size_t t = 0; t < w.targets.size(); ++t) {
    const VehicleState& v = w.targets[t];
    TrajectoryRow r;
    r.step = step;
    r.entity_id = "target_" + std::to_string(t);
    r.kind = "target";
    r.x = v.position.x();
    r.y = v.position.y();
    r.z = v.position.z();
    r.heading = v.heading;
    r.reward = reward;
    r.collision = collision ? 1 : 0;

    // best-informed track across agents, matching the reward's attribution
    double best = std::numeric_limits<double>::infinity();
    const Eigen::Vector2d true_xy = v.position.head<2>();
    for (const KnowledgeBase& kb : w.knowledge) {
      const TrackEstimate& est = kb.targets[t].estimate;
      const double err = (est.position_xy - true_xy).norm();
      if (err < best) {
        best = err;
        r.est_x = est.position_xy.x();
        r.est_y = est.position_xy.y();
      }
    }
    if (t < out.tracking_error.size() && step > 0) {
      r.track_err = out.tracking_error[t];
    } else if (std::isfinite(best)) {
      r.track_err = best;
    }
    rows.push_back(std::move(r));
  }
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

void write_trajectory_csv(const std::string& path,
                          const std::vector<TrajectoryRow>& rows) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write trajectory CSV: " + path);
  out << kTrajectoryHeader << "\n";
  for (const TrajectoryRow& r : rows) {
    out << r.step << ',' << r.entity_id << ',' << r.kind << ',' << fmt(r.x) << ','
        << fmt(r.y) << ',' << fmt(r.z) << ',' << fmt(r.heading) << ','
        << (r.est_x ? fmt(*r.est_x) : "") << ',' << (r.est_y ? fmt(*r.est_y) : "")
        << ',' << (r.track_err ? fmt(*r.track_err) : "") << ',' << fmt(r.reward)
        << ',' << r.collision << "\n";
  }
}

std::vector<TrajectoryRow> read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trajectory CSV: " + path);

  std::string line;
  int line_no = 0;
  if (!std::getline(in, line)) throw DataError(path + ":1: empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kTrajectoryHeader)
    throw DataError(path + ":1: bad header, expected '" +
                    std::string(kTrajectoryHeader) + "'");

  std::vector<TrajectoryRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 12)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected 12 fields, got " +
                      std::to_string(fields.size()));

    try {
      TrajectoryRow r;
      r.step = std::stoi(fields[0]);
      r.entity_id = fields[1];
      r.kind = fields[2];
      r.x = std::stod(fields[3]);
      r.y = std::stod(fields[4]);
      r.z = std::stod(fields[5]);
      r.heading = std::stod(fields[6]);
      if (!fields[7].empty()) r.est_x = std::stod(fields[7]);
      if (!fields[8].empty()) r.est_y = std::stod(fields[8]);
      if (!fields[9].empty()) r.track_err = std::stod(fields[9]);
      r.reward = std::stod(fields[10]);
      r.collision = std::stoi(fields[11]);
      if (r.kind != "agent" && r.kind != "target")
        throw std::invalid_argument("kind");
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(line_no) + ": malformed row '" +
                      line + "'");
    }
  }
  return rows;
}

namespace {

constexpr int kW = 860;
constexpr int kH = 640;
constexpr int kMargin = 60;
constexpr int kLegendW = 170;

const char* agent_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#2ca02c", "#9467bd", "#17becf",
                                  "#8c564b"};
  return palette[i % 5];
}
const char* target_color(std::size_t i) {
  static const char* palette[] = {"#d62728", "#ff7f0e", "#e377c2", "#bcbd22",
                                  "#7f7f7f"};
  return palette[i % 5];
}

}  // namespace

std::string trajectory_svg(const std::vector<TrajectoryRow>& rows) {
  // entity_id -> ordered points; std::map keeps legend order stable
  std::map<std::string, std::vector<const TrajectoryRow*>> by_entity;
  for (const TrajectoryRow& r : rows) by_entity[r.entity_id].push_back(&r);

  double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
  bool have_pts = false;
  auto expand = [&](double x, double y) {
    if (!have_pts) {
      xmin = xmax = x;
      ymin = ymax = y;
      have_pts = true;
    } else {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  };
  for (const TrajectoryRow& r : rows) {
    expand(r.x, r.y);
    if (r.est_x && r.est_y) expand(*r.est_x, *r.est_y);
  }
  const double spanx = std::max(xmax - xmin, 1e-9);
  const double spany = std::max(ymax - ymin, 1e-9);
  const double plot_w = kW - 2 * kMargin - kLegendW;
  const double plot_h = kH - 2 * kMargin;
  const double scale = std::min(plot_w / spanx, plot_h / spany);

  auto px = [&](double x) { return kMargin + (x - xmin) * scale; };
  auto py = [&](double y) { return kH - kMargin - (y - ymin) * scale; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW
      << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW << ' ' << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  // axes
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kH - kMargin << "\" x2=\""
      << kW - kMargin - kLegendW << "\" y2=\"" << kH - kMargin
      << "\" stroke=\"#333\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin
      << "\" y2=\"" << kH - kMargin << "\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + spanx * i / 4.0;
    const double fy = ymin + spany * i / 4.0;
    svg << "<text x=\"" << px(fx) << "\" y=\"" << kH - kMargin + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt(std::round(fx))
        << "</text>\n";
    svg << "<text x=\"" << kMargin - 8 << "\" y=\"" << py(fy) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(std::round(fy))
        << "</text>\n";
  }
  svg << "<text x=\"" << (kMargin + (kW - kLegendW)) / 2 << "\" y=\"" << kH - 14
      << "\" font-size=\"12\" text-anchor=\"middle\">x east [m]</text>\n";
  svg << "<text x=\"16\" y=\"" << kH / 2
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << kH / 2 << ")\">y north [m]</text>\n";

  std::size_t agent_idx = 0, target_idx = 0;
  int legend_y = kMargin;
  for (const auto& [id, pts] : by_entity) {
    const bool is_agent = pts.front()->kind == "agent";
    const char* color =
        is_agent ? agent_color(agent_idx++) : target_color(target_idx++);

    auto polyline = [&](auto getx, auto gety, const char* dash) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
      if (dash[0]) svg << " stroke-dasharray=\"" << dash << "\"";
      svg << " points=\"";
      for (const TrajectoryRow* r : pts) {
        const auto ox = getx(*r);
        const auto oy = gety(*r);
        if (!ox || !oy) continue;
        svg << px(*ox) << ',' << py(*oy) << ' ';
      }
      svg << "\"/>\n";
    };
    polyline([](const TrajectoryRow& r) { return std::optional<double>(r.x); },
             [](const TrajectoryRow& r) { return std::optional<double>(r.y); }, "");
    if (!is_agent)
      polyline([](const TrajectoryRow& r) { return r.est_x; },
               [](const TrajectoryRow& r) { return r.est_y; }, "4 3");

    // start marker
    svg << "<circle cx=\"" << px(pts.front()->x) << "\" cy=\"" << py(pts.front()->y)
        << "\" r=\"3\" fill=\"" << color << "\"/>\n";

    svg << "<text x=\"" << kW - kLegendW + 14 << "\" y=\"" << legend_y
        << "\" font-size=\"12\" fill=\"" << color << "\" class=\"legend\">" << id
        << (is_agent ? "" : " (+est)") << "</text>\n";
    legend_y += 18;
  }

  // collision markers
  for (const TrajectoryRow& r : rows) {
    if (!r.collision || r.kind != "agent") continue;
    const double cx = px(r.x), cy = py(r.y);
    svg << "<path d=\"M" << cx - 4 << ' ' << cy - 4 << " L" << cx + 4 << ' '
        << cy + 4 << " M" << cx - 4 << ' ' << cy + 4 << " L" << cx + 4 << ' '
        << cy - 4 << "\" stroke=\"red\" stroke-width=\"2\"/>\n";
  }

  svg << "</svg>\n";
  return svg.str();
}

void write_trajectory_svg(const std::string& path,
                          const std::vector<TrajectoryRow>& rows) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write SVG: " + path);
  out << trajectory_svg(rows);
}

}  // namespace utrack
