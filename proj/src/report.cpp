#include <fstream>
#include <iomanip>
#include <sstream>

#include "moelab/pipeline.hpp"

namespace moelab {

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

void render_retrieval(std::ostringstream& os, const char* name, const RetrievalMetrics& m) {
  os << "  " << std::left << std::setw(14) << name << " I2T " << pct(m.i2t_r1) << " / "
     << pct(m.i2t_r5) << " / " << pct(m.i2t_r10) << "   T2I " << pct(m.t2i_r1) << " / "
     << pct(m.t2i_r5) << " / " << pct(m.t2i_r10) << "\n";
}

}  // namespace

void emit_report(const EvalReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir + "/report.json", report_json(report).dump(2) + "\n");

  json timings;
  for (const auto& [k, v] : report.timings) timings[k] = v;
  write_file(dir + "/timings.json", timings.dump(2) + "\n");

  std::ostringstream os;
  os << "Retrieval recall @1 / @5 / @10\n";
  render_retrieval(os, "base", report.base);
  render_retrieval(os, "dmu_moe", report.dmu);
  render_retrieval(os, "upcycled_moe", report.upcycled);

  os << "\nLinear-probe accuracy per stage snapshot (rows: stage, cols: attribute)\n";
  for (std::size_t s = 0; s < report.stage_probe_acc.size(); ++s) {
    os << "  stage " << s << ":";
    for (double a : report.stage_probe_acc[s]) os << "  " << pct(a);
    os << "\n";
  }

  os << "\nForced-expert specialization (rows: expert; probe accs, then recall@1)\n";
  for (std::size_t e = 0; e < report.expert_probe_acc.size(); ++e) {
    os << "  expert " << e << ":";
    for (double a : report.expert_probe_acc[e]) os << "  " << pct(a);
    if (e < report.expert_forced_recall1.size())
      os << "  | r@1 " << pct(report.expert_forced_recall1[e]);
    os << "\n";
  }

  os << "\nRouting top-k fractions per block (dmu_moe)\n";
  for (std::size_t b = 0; b < report.routing_dmu.blocks.size(); ++b) {
    os << "  block " << b << ":";
    for (double f : report.routing_dmu.blocks[b].topk_fraction) os << "  " << pct(f);
    os << "\n";
  }
  write_file(dir + "/report.txt", os.str());
}

}  // namespace moelab
