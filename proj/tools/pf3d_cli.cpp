#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pf3d/config.hpp"
#include "pf3d/gradcheck.hpp"
#include "pf3d/mesh_io.hpp"

namespace fs = std::filesystem;
using namespace pf3d;
using nlohmann::json;

namespace {

struct Args {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint;
  std::string resume;
  std::string generated;
};

// Machine-readable failure: one JSON object on a single stderr line.
int fail(const std::string& command, const std::string& kind, const std::string& message,
         const std::vector<std::string>& keys = {}) {
  json e{{"error", kind}, {"command", command}, {"message", message}};
  if (!keys.empty()) e["keys"] = keys;
  std::cerr << e.dump() << std::endl;
  return kind == "config" ? 2 : 1;
}

RunConfig resolve(const Args& a) {
  RunConfig rc;
  if (!a.config_path.empty()) rc.merge_file(a.config_path);
  rc.apply_overrides(a.overrides);
  for (const std::string& o : rc.overrides()) std::cout << "override " << o << "\n";
  return rc;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

void write_echo(const RunConfig& rc, const fs::path& dir, const std::string& command) {
  json e = rc.echo();
  e["command"] = command;
  write_text(dir / "config.json", e.dump(2) + "\n");
}

fs::path manifest_path(const RunConfig& rc) { return rc.dataset_dir() / "manifest.json"; }

// The checkpoint carries the resolved config it was trained with; model and
// training sections come from there, everything else from the current run.
Trainer trainer_from_checkpoint(const fs::path& path) {
  if (path.empty()) throw std::invalid_argument("--checkpoint is required");
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint: " + path.string());
  const Checkpoint ck = load_checkpoint(path);
  const json meta = json::parse(ck.meta);
  RunConfig saved;
  saved.merge(meta.at("config"));
  Trainer t(saved.train(meta.at("image_size").get<std::size_t>()));
  t.restore(ck);
  return t;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int cmd_gen_data(const RunConfig& rc) {
  const fs::path dir = rc.dataset_dir();
  const DatasetManifest m = generate_dataset(rc.dataset(), dir);
  write_echo(rc, dir, "gen-data");
  std::cout << "wrote " << m.records.size() << " records for " << m.shapes.size() << " shapes to " << dir.string()
            << "\n";
  return 0;
}

void save_ckpt(const Trainer& t, const RunConfig& rc, const fs::path& path) {
  json extra{{"config", rc.nested()}, {"image_size", t.config().model.image_size}};
  save_checkpoint(path, t.checkpoint(extra));
}

int cmd_train(const RunConfig& rc, const Args& a) {
  const std::size_t batch = rc.get<std::size_t>("train.batch_size");
  DatasetLoader loader(manifest_path(rc), batch, rc.get<std::uint64_t>("train.seed"), Split::kTrain, rc.augment());
  Trainer t(rc.train(loader.image_size()));
  const fs::path out = rc.output_dir();
  fs::create_directories(out / "checkpoints");
  write_echo(rc, out, "train");
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw std::runtime_error("missing checkpoint: " + a.resume);
    t.restore(load_checkpoint(a.resume));
    std::cout << "resumed at iteration " << t.state().iteration << "\n";
  }
  const bool fresh = a.resume.empty() || !fs::exists(out / "losses.csv");
  std::ofstream log(out / "losses.csv", fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + (out / "losses.csv").string());
  if (fresh) log << LossReport::csv_header() << "\n";

  const std::int64_t total = t.config().total_iterations;
  const auto starts = phase_starts(total, t.config().phase_boundaries);
  const auto every = rc.get<std::int64_t>("train.checkpoint_every");
  auto ckpt_name = [&](std::int64_t it) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "iter_%07lld.bin", static_cast<long long>(it));
    return out / "checkpoints" / buf;
  };
  try {
    train(t, loader, [&](const LossReport& r) {
      log << r.csv_row() << "\n";
      const std::int64_t next = r.iteration + 1;
      const bool boundary = std::find(starts.begin(), starts.end(), next) != starts.end();
      if (boundary || (every > 0 && next % every == 0)) save_ckpt(t, rc, ckpt_name(next));
      if (next % 100 == 0 || next == total)
        std::cout << "iteration " << next << "/" << total << " phase " << r.phase << " total " << r.total << "\n";
    });
  } catch (const TrainingAborted& e) {
    log.flush();
    save_ckpt(t, rc, out / "checkpoints" / "aborted.bin");
    throw;
  }
  for (const std::string& d : t.state().diagnostics) std::cout << "warning " << d << "\n";
  save_ckpt(t, rc, out / "final.bin");
  std::cout << "wrote " << (out / "final.bin").string() << "\n";
  return 0;
}

std::vector<SurfaceMesh> generate_meshes(const Trainer& t, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SurfaceMesh> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(t.sample_mesh(rng));
  return out;
}

int cmd_export(const RunConfig& rc, const Args& a) {
  const Trainer t = trainer_from_checkpoint(a.checkpoint);
  const fs::path dir = rc.output_dir() / "meshes";
  fs::create_directories(dir);
  const auto meshes = generate_meshes(t, rc.get<std::size_t>("export.count"), rc.get<std::uint64_t>("export.seed"));
  for (std::size_t i = 0; i < meshes.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "gen_%04zu.obj", i);
    write_obj(dir / buf, meshes[i]);
    if (meshes[i].empty()) std::cout << "warning mesh " << i << " is empty (collapsed shape)\n";
  }
  std::cout << "wrote " << meshes.size() << " meshes to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const Args& a) {
  std::vector<SurfaceMesh> gen;
  if (!a.generated.empty()) {
    const fs::path dir = a.generated;
    if (!fs::is_directory(dir)) throw std::invalid_argument("eval: generated directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".obj") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("eval: generated directory " + dir.string() + " contains no .obj meshes");
    for (const auto& f : files) gen.push_back(read_obj(f));
  }
  const DatasetManifest m = read_manifest(manifest_path(rc));
  const auto splits = split_shapes(m.config.shapes, m.config.seed);
  const auto& ids = splits[static_cast<std::size_t>(rc.reference_split())];
  if (ids.empty())
    throw std::invalid_argument("eval: reference split " + rc.get<std::string>("eval.reference_split") + " has no shapes out of " +
                                std::to_string(m.config.shapes));
  std::vector<SurfaceMesh> ref;
  for (int id : ids) ref.push_back(manifest_shape_mesh(m, id));

  if (a.generated.empty()) {
    const Trainer t = trainer_from_checkpoint(a.checkpoint);
    gen = generate_meshes(t, rc.get<std::size_t>("eval.generated_per_reference") * ref.size(),
                          rc.get<std::uint64_t>("eval.seed"));
  }
  const EvalConfig ec = rc.eval();
  const EvalReport r = eval_report(gen, ref, ec);
  const fs::path out = rc.output_dir();
  fs::create_directories(out);
  json j{{"cov_cd_percent", r.cov_cd},
         {"mmd_cd_x1e3", r.mmd_cd},
         {"generated", r.generated},
         {"reference", r.reference},
         {"points", ec.points},
         {"chamfer", ec.chamfer.mean ? "mean" : "sum"},
         {"warnings", r.warnings}};
  write_text(out / "eval.json", j.dump(2) + "\n");
  if (ec.keep_matrix) {
    std::string csv;
    for (const auto& row : r.matrix) {
      for (std::size_t c = 0; c < row.size(); ++c) csv += (c ? "," : "") + fmt(row[c]);
      csv += "\n";
    }
    write_text(out / "distance_matrix.csv", csv);
  }
  for (const auto& w : r.warnings) std::cout << "warning " << w << "\n";
  std::cout << "COV-CD " << r.cov_cd << "% MMD-CD " << r.mmd_cd << "\n";
  return 0;
}

int cmd_camera_report(const RunConfig& rc, const Args& a) {
  const Trainer t = trainer_from_checkpoint(a.checkpoint);
  const std::size_t n = rc.get<std::size_t>("camera_report.probes");
  if (n == 0) throw ConfigError("config: camera_report.probes must be >= 1", {"camera_report.probes"});
  const auto comps = t.learned_components(n);
  const CameraPoseDistribution learned = mixture_moments(comps);

  std::mt19937_64 rng(rc.get<std::uint64_t>("train.seed") + 17);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Camera6D> samples;
  std::string csv = "theta,phi,k,dx,dy,dz\n";
  for (const auto& c : comps) {
    std::array<double, 6> e{};
    for (double& v : e) v = nd(rng);
    samples.push_back(sample_camera(c, e));
    const auto v = samples.back().to_array();
    for (int j = 0; j < kCameraDims; ++j) csv += (j ? "," : "") + fmt(v[j]);
    csv += "\n";
  }
  const fs::path out = rc.output_dir();
  write_text(out / "camera_samples.csv", csv);

  const DatasetManifest m = read_manifest(manifest_path(rc));
  std::vector<Camera6D> truth;
  for (const auto& r : m.records) truth.push_back(r.camera);
  const CameraPoseDistribution tm = empirical_moments(truth);
  const CameraPoseDistribution sm = empirical_moments(samples);

  std::string rep = "param,learned_mean,learned_std,true_mean,true_std,abs_error\n";
  json summary{{"learned", distribution_to_json(learned)},
               {"samples", distribution_to_json(sm)},
               {"true", distribution_to_json(tm)},
               {"probes", n}};
  for (int j = 0; j < kCameraDims; ++j) {
    const double err = j == kTheta ? angular_distance(learned.mean[j], tm.mean[j]) : std::abs(learned.mean[j] - tm.mean[j]);
    rep += std::string(kCameraParamNames[j]) + "," + fmt(learned.mean[j]) + "," + fmt(learned.stddev[j]) + "," +
           fmt(tm.mean[j]) + "," + fmt(tm.stddev[j]) + "," + fmt(err) + "\n";
    summary["abs_error"][kCameraParamNames[j]] = err;
  }
  write_text(out / "cameras.csv", rep);
  write_text(out / "camera_summary.json", summary.dump(2) + "\n");
  std::cout << rep;
  return 0;
}

int cmd_grad_check() {
  bool ok = true;
  std::printf("%-12s %-28s %12s %10s %s\n", "suite", "check", "max_error", "threshold", "result");
  for (const auto& r : all_gradient_suites()) {
    std::printf("%-12s %-28s %12.3e %10.0e %s\n", r.suite.c_str(), r.name.c_str(), r.max_error, r.threshold,
                r.pass() ? "ok" : "FAIL");
    ok = ok && r.pass();
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative 3D shapes with learned camera distributions"};
  app.require_subcommand(1);
  app.footer(config_help());
  Args a;
  auto common = [&](CLI::App* s) {
    s->add_option("-c,--config", a.config_path, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("overrides", a.overrides, "key=value overrides, applied in order after the file");
    s->footer(config_help());
    return s;
  };
  auto* gen = common(app.add_subcommand("gen-data", "render a synthetic dataset"));
  auto* tr = common(app.add_subcommand("train", "train the generator and camera distribution"));
  tr->add_option("--resume", a.resume, "checkpoint to resume from");
  auto* ev = common(app.add_subcommand("eval", "COV and MMD of generated shapes against dataset shapes"));
  ev->add_option("--generated", a.generated, "directory of generated .obj meshes");
  ev->add_option("--checkpoint", a.checkpoint, "checkpoint to generate from when --generated is absent");
  auto* ex = common(app.add_subcommand("export-mesh", "write generated meshes as OBJ"));
  ex->add_option("--checkpoint", a.checkpoint, "trained checkpoint")->required();
  auto* cr = common(app.add_subcommand("camera-report", "learned against true camera distribution"));
  cr->add_option("--checkpoint", a.checkpoint, "trained checkpoint")->required();
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suites");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    if (gc->parsed()) return cmd_grad_check();
    const RunConfig rc = resolve(a);
    if (gen->parsed()) return cmd_gen_data(rc);
    if (tr->parsed()) return cmd_train(rc, a);
    if (ev->parsed()) return cmd_eval(rc, a);
    if (ex->parsed()) return cmd_export(rc, a);
    if (cr->parsed()) return cmd_camera_report(rc, a);
  } catch (const ConfigError& e) {
    return fail(command, "config", e.what(), e.keys);
  } catch (const TrainingAborted& e) {
    return fail(command, "training_aborted", e.what());
  } catch (const std::exception& e) {
    return fail(command, "runtime", e.what());
  }
  return fail(command, "usage", "no command");
}
