#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "opama/error.hpp"
#include "opama/geometry.hpp"
#include "opama/image_io.hpp"
#include "opama/pipeline.hpp"
#include "opama/verify.hpp"

namespace fs = std::filesystem;
using namespace opama;

namespace {

constexpr int kExitContract = 1;
constexpr int kExitIo = 2;

// Config file first, then --set pairs; the caller applies dedicated flags last.
RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

Tensor resize_bilinear(const Tensor& img, std::int64_t size) {
  const std::int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (h == size && w == size) return img;
  Tensor out(Shape{size, size, c});
  auto src = img.data();
  auto dst = out.data();
  for (std::int64_t v = 0; v < size; ++v)
    for (std::int64_t u = 0; u < size; ++u) {
      const double y = std::clamp((v + 0.5) * static_cast<double>(h) / size - 0.5, 0.0, h - 1.0);
      const double x = std::clamp((u + 0.5) * static_cast<double>(w) / size - 0.5, 0.0, w - 1.0);
      const auto y0 = static_cast<std::int64_t>(y), x0 = static_cast<std::int64_t>(x);
      const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = y - y0, fx = x - x0;
      for (std::int64_t k = 0; k < c; ++k) {
        auto at = [&](std::int64_t yy, std::int64_t xx) { return src[static_cast<std::size_t>((yy * w + xx) * c + k)]; };
        dst[static_cast<std::size_t>((v * size + u) * c + k)] =
            (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
      }
    }
  return out;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::ostringstream os;
  os << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// ---------------------------------------------------------------------------

struct ProjectArgs {
  std::string in, to, out;
  double lon = 0, lat = 0, fov = 90;
  std::int64_t size = 0, width = 0;
};

int cmd_project(const ProjectArgs& a) {
  if (a.to == "cubemap") {
    const EquirectImage img(read_image(a.in));
    const auto cube = equirect_to_cubemap(img, a.size > 0 ? a.size : img.height() / 2);
    fs::create_directories(a.out);
    for (Face f : kFaceOrder)
      write_image(fs::path(a.out) / (std::string(1, face_name(f)) + ".png"), cube.face(f));
    std::cout << "wrote 6 faces of " << cube.face_size << " px to " << a.out << "\n";
  } else if (a.to == "equirect") {
    if (!fs::is_directory(a.in)) throw IoError(a.in + " is not a directory of cube faces");
    CubeMap cube;
    for (Face f : kFaceOrder) {
      const auto i = static_cast<std::size_t>(f);
      cube.faces[i] = read_image(fs::path(a.in) / (std::string(1, face_name(f)) + ".png"));
      if (cube.faces[i].dim(0) != cube.faces[i].dim(1)) throw ContractError("cube faces must be square");
      if (cube.face_size != 0 && cube.faces[i].dim(0) != cube.face_size)
        throw ContractError("cube faces differ in size");
      cube.face_size = cube.faces[i].dim(0);
      cube.masks[i] = Tensor(Shape{cube.face_size, cube.face_size}, 1.0);
    }
    const std::int64_t w = a.width > 0 ? a.width : 4 * cube.face_size;
    if (w % 2) throw ContractError("--width must be even");
    write_image(a.out, cubemap_to_equirect(cube, w, w / 2).pixels);
    std::cout << "wrote " << w << "x" << w / 2 << " panorama to " << a.out << "\n";
  } else {
    const EquirectImage img(read_image(a.in));
    const ViewCoords c{a.lon, a.lat, a.fov};
    validate(c);
    const auto view = extract_nfov(img, c, a.size > 0 ? a.size : img.height() / 2);
    write_image(a.out, view.image);
    std::cout << "wrote " << view.image.dim(0) << " px view to " << a.out << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data_dir, ckpt_out = "model.ckpt", resume, loss_csv;
  std::vector<std::string> sets;
  std::int64_t steps = 2000;
  std::int64_t log_every = 50;
};

std::vector<CorpusItem> load_or_make_corpus(const RunConfig& cfg, const std::string& dir) {
  if (!dir.empty() && fs::is_directory(dir)) {
    std::vector<fs::path> pngs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".png") pngs.push_back(e.path());
    std::sort(pngs.begin(), pngs.end());
    if (!pngs.empty()) {
      std::vector<CorpusItem> corpus;
      for (const auto& p : pngs) {
        EquirectImage img(read_image(p));
        if (img.width() != cfg.pano_w || img.height() != cfg.pano_h || img.channels() != 3)
          throw ContractError(p.string() + ": expected " + std::to_string(cfg.pano_w) + "x" +
                              std::to_string(cfg.pano_h) + " RGB");
        std::string caption;
        std::ifstream txt(fs::path(p).replace_extension(".txt"));
        if (txt) std::getline(txt, caption);
        corpus.push_back({std::move(img), caption});
      }
      return corpus;
    }
  }
  auto corpus = make_corpus(cfg);
  if (!dir.empty()) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      std::ostringstream stem;
      stem << "pano_" << std::setw(4) << std::setfill('0') << i;
      write_image(fs::path(dir) / (stem.str() + ".png"), corpus[i].panorama.pixels);
      std::ofstream(fs::path(dir) / (stem.str() + ".txt")) << corpus[i].caption << "\n";
    }
  }
  return corpus;
}

int cmd_train(const TrainArgs& a, const RunConfig& cfg) {
  if (a.steps < 1) throw ContractError("--steps must be >= 1");
  Models models(cfg);
  const auto corpus = load_or_make_corpus(cfg, a.data_dir);
  TrainOptions opts;
  opts.steps = a.steps;
  opts.resume = a.resume;
  opts.checkpoint = a.ckpt_out;
  opts.loss_csv = a.loss_csv.empty() ? fs::path(a.ckpt_out).replace_extension(".loss.csv") : fs::path(a.loss_csv);
  opts.on_step = [&](std::int64_t step, double loss) {
    if (a.log_every > 0 && step % a.log_every == 0)
      std::cerr << "step " << step << " loss " << std::setprecision(5) << loss << "\n";
  };
  const auto summary = train(models, corpus, opts);
  std::cout << "trained steps " << summary.first_step << ".." << summary.last_step << " in " << std::fixed
            << std::setprecision(1) << summary.seconds << " s; checkpoint " << a.ckpt_out << ", losses "
            << opts.loss_csv.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string ckpt, seed_image, text, config, out_dir = "out";
  std::vector<std::string> sets;
  double lon = 0, lat = 0, fov = 0;
};

int cmd_generate(const GenerateArgs& a, const RunConfig& cfg) {
  if (a.seed_image.empty() && a.text.empty()) throw ContractError("generate needs --seed-image, --text or both");
  Models models(cfg);
  load_training_checkpoint(a.ckpt, models, nullptr);
  NFoVView seed;
  if (!a.seed_image.empty()) {
    Tensor img = read_image(a.seed_image);
    if (img.dim(2) != 3) throw ContractError("seed image must be RGB");
    if (img.dim(0) != img.dim(1)) throw ContractError("seed image must be square");
    seed.coords = {a.lon, a.lat, a.fov > 0 ? a.fov : cfg.view_fov};
    validate(seed.coords);
    seed.image = resize_bilinear(img, cfg.view_size);
    seed.mask = Tensor(Shape{cfg.view_size, cfg.view_size}, 1.0);
  }
  const auto result = generate_panorama(models, a.seed_image.empty() ? nullptr : &seed, a.text);
  const std::string mode = a.seed_image.empty() ? "text" : (a.text.empty() ? "image" : "image+text");
  write_outputs(a.out_dir, result, cfg,
                {"mode = " + mode, "checkpoint = " + a.ckpt, "seed_image = " + a.seed_image, "text = " + a.text,
                 "seed_coords = " + std::to_string(seed.coords.lon) + " " + std::to_string(seed.coords.lat) + " " +
                     std::to_string(seed.coords.fov),
                 "timestamp_utc (varies between runs) = " + utc_now()});
  std::cout << "wrote " << (fs::path(a.out_dir) / "panorama.png").string() << " (" << mode << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_verify(const std::string& suite, double tolerance_scale, int jobs) {
  std::vector<CheckResult> results;
  if (suite == "all" && jobs > 1) {
    std::vector<std::future<std::vector<CheckResult>>> futs;
    for (const auto& s : suite_names())
      futs.push_back(std::async(std::launch::async, [s, tolerance_scale] { return run_suite(s, tolerance_scale); }));
    for (auto& f : futs) {
      auto part = f.get();
      results.insert(results.end(), part.begin(), part.end());
    }
  } else {
    results = run_suite(suite, tolerance_scale);
  }
  std::cout << format_results(results);
  std::size_t failed = 0;
  for (const auto& r : results)
    if (!r.pass) {
      ++failed;
      std::cerr << "FAILED " << r.suite << "/" << r.name << "\n";
    }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : kExitContract;
}

struct BenchArgs {
  std::string kernel = "scan", variant = "both", csv;
  std::int64_t L = 1024, N = 16, D = 8;
  std::uint64_t seed = 0;
  int repeat = 1;
  unsigned threads = 1;
};

int cmd_bench(const BenchArgs& a) {
  if (a.kernel != "scan") throw ContractError("unknown kernel '" + a.kernel + "'");
  if (a.repeat < 1) throw ContractError("--repeat must be >= 1");
  std::vector<ScanVariant> variants;
  if (a.variant != "parallel") variants.push_back(ScanVariant::sequential);
  if (a.variant != "sequential") variants.push_back(ScanVariant::parallel);
  std::ofstream file;
  if (!a.csv.empty()) {
    file.open(a.csv);
    if (!file) throw IoError("cannot write " + a.csv);
  }
  std::ostream& os = a.csv.empty() ? std::cout : file;
  os << kBenchHeader << "\n";
  for (auto v : variants) {
    BenchRow best = bench_scan(a.L, a.N, a.D, v, a.seed, a.threads);
    for (int r = 1; r < a.repeat; ++r) {
      const auto row = bench_scan(a.L, a.N, a.D, v, a.seed, a.threads);
      if (row.wall_ns < best.wall_ns) best = row;
    }
    os << to_csv(best) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Panorama out-painting toolkit"};
  app.require_subcommand(1);

  ProjectArgs pa;
  auto* project = app.add_subcommand("project", "convert between equirect, cubemap and perspective views");
  project->add_option("--in", pa.in, "input image (equirect), or face directory for --to equirect")->required();
  project->add_option("--to", pa.to, "target representation")
      ->required()
      ->check(CLI::IsMember({"cubemap", "equirect", "nfov"}));
  project->add_option("--out", pa.out, "output image, or directory for cube faces")->required();
  project->add_option("--lon", pa.lon, "view longitude, degrees");
  project->add_option("--lat", pa.lat, "view latitude, degrees");
  project->add_option("--fov", pa.fov, "view field of view, degrees");
  project->add_option("--size", pa.size, "face or view extent in pixels (default: input height / 2)");
  project->add_option("--width", pa.width, "equirect width (default: 4 x face size)");

  TrainArgs ta;
  std::uint64_t train_seed = 0;
  double train_lr = 0;
  auto* trainc = app.add_subcommand("train", "train the conditioning stack and denoiser");
  trainc->add_option("--config", ta.config, "config file");
  trainc->add_option("--data-dir", ta.data_dir, "corpus directory (PNG + caption .txt); synthesized when empty");
  trainc->add_option("--steps", ta.steps, "optimizer steps to run");
  trainc->add_option("--ckpt-out", ta.ckpt_out, "checkpoint written at the end");
  trainc->add_option("--resume", ta.resume, "checkpoint to continue from");
  trainc->add_option("--loss-csv", ta.loss_csv, "loss log (default: <ckpt-out>.loss.csv)");
  trainc->add_option("--set", ta.sets, "config override key=value (repeatable)");
  auto* train_seed_opt = trainc->add_option("--seed", train_seed, "run seed");
  auto* train_lr_opt = trainc->add_option("--lr", train_lr, "learning rate");
  trainc->add_option("--log-every", ta.log_every, "progress line interval (0: silent)");

  GenerateArgs ga;
  std::uint64_t gen_seed = 0;
  int gen_steps = 0;
  double gen_cfg = 0;
  auto* generate = app.add_subcommand("generate", "grow a panorama from a view, a prompt or both");
  generate->add_option("--ckpt", ga.ckpt, "trained checkpoint")->required();
  generate->add_option("--seed-image", ga.seed_image, "square RGB view");
  generate->add_option("--text", ga.text, "text prompt");
  generate->add_option("--config", ga.config, "config file (must match the checkpoint)");
  generate->add_option("--out-dir", ga.out_dir, "output directory");
  generate->add_option("--lon", ga.lon, "seed view longitude, degrees");
  generate->add_option("--lat", ga.lat, "seed view latitude, degrees");
  generate->add_option("--fov", ga.fov, "seed view field of view (default: view_fov)");
  generate->add_option("--set", ga.sets, "config override key=value (repeatable)");
  auto* gen_seed_opt = generate->add_option("--seed", gen_seed, "sampling seed");
  auto* gen_steps_opt = generate->add_option("--steps", gen_steps, "sampling steps per view");
  auto* gen_cfg_opt = generate->add_option("--cfg-scale", gen_cfg, "guidance scale");

  std::string suite = "all";
  double tolerance_scale = 1.0;
  int jobs = 1;
  auto* verify = app.add_subcommand("verify", "run property suites and print a pass/fail table");
  verify->add_option("--suite", suite, "suite name")->check(CLI::IsMember({"scan", "grad", "geometry", "diffusion",
                                                                           "vcr", "gma", "all"}));
  verify->add_option("--tolerance-scale", tolerance_scale, "multiply every tolerance (testing aid)");
  verify->add_option("--jobs", jobs, "run suites of --suite all concurrently");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time a kernel and emit CSV rows");
  bench->add_option("--kernel", ba.kernel, "kernel name")->check(CLI::IsMember({"scan"}));
  bench->add_option("--L", ba.L, "sequence length");
  bench->add_option("--N", ba.N, "state size");
  bench->add_option("--D", ba.D, "channels");
  bench->add_option("--variant", ba.variant, "sequential, parallel or both")
      ->check(CLI::IsMember({"sequential", "parallel", "both"}));
  bench->add_option("--csv", ba.csv, "output file (default: stdout)");
  bench->add_option("--seed", ba.seed, "operand seed");
  bench->add_option("--repeat", ba.repeat, "repetitions; the fastest is reported");
  bench->add_option("--threads", ba.threads, "worker threads of the parallel scan");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    const auto subs = app.get_subcommands();
    std::cerr << (subs.empty() ? app.help() : subs.front()->help());
    return kExitContract;
  }

  try {
    if (*project) return cmd_project(pa);
    if (*trainc) {
      RunConfig cfg = resolve_config(ta.config, ta.sets);
      if (*train_seed_opt) cfg.seed = train_seed;
      if (*train_lr_opt) cfg.lr = train_lr;
      cfg.validate();
      return cmd_train(ta, cfg);
    }
    if (*generate) {
      RunConfig cfg = resolve_config(ga.config, ga.sets);
      if (*gen_seed_opt) cfg.seed = gen_seed;
      if (*gen_steps_opt) cfg.sample_steps = gen_steps;
      if (*gen_cfg_opt) cfg.cfg_scale = gen_cfg;
      cfg.validate();
      return cmd_generate(ga, cfg);
    }
    if (*verify) return cmd_verify(suite, tolerance_scale, jobs);
    if (*bench) return cmd_bench(ba);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  }
  return kExitContract;
}
