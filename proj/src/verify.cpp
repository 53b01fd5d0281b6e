#include "opama/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>

#include "opama/conditioning.hpp"
#include "opama/diffusion.hpp"
#include "opama/error.hpp"
#include "opama/geometry.hpp"
#include "opama/unet.hpp"

namespace opama {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<double> rand_vec(std::size_t n, Rng& rng, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

class Collector {
 public:
  Collector(std::string suite, double scale) : suite_(std::move(suite)), scale_(scale) {}

  // value <= limit passes
  void at_most(const std::string& name, double value, double limit, std::string detail = {}) {
    limit *= scale_;
    add(name, value <= limit, value, limit, std::move(detail));
  }
  void at_least(const std::string& name, double value, double limit, std::string detail = {}) {
    limit /= scale_;
    add(name, value >= limit, value, limit, std::move(detail));
  }
  void holds(const std::string& name, bool ok, std::string detail = {}) {
    add(name, ok, ok ? 1.0 : 0.0, 1.0, std::move(detail));
  }
  // guards a check body so that a thrown error is reported as a failure
  void guard(const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      add(name, false, NAN, NAN, std::string("error: ") + e.what());
    }
  }
  std::vector<CheckResult> take() { return std::move(out_); }

 private:
  void add(const std::string& name, bool pass, double value, double limit, std::string detail) {
    CheckResult r{suite_, name, pass && std::isfinite(value), value, limit, std::move(detail),
                  elapsed(last_)};
    last_ = Clock::now();
    out_.push_back(std::move(r));
  }
  std::string suite_;
  double scale_;
  std::vector<CheckResult> out_;
  Clock::time_point last_ = Clock::now();
};

MambaConfig small_mamba(std::int64_t d = 8) {
  MambaConfig c;
  c.d_model = d;
  c.state = 4;
  return c;
}

ConditioningConfig small_conditioning() {
  ConditioningConfig c;
  c.d_model = 8;
  c.ssm_state = 4;
  c.vcr_blocks = 8;
  c.gma_width = 8;
  c.unet_widths = {8, 16, 24, 32};
  return c;
}

CubeMap random_cube(std::int64_t s, Rng& rng) {
  CubeMap cube;
  cube.face_size = s;
  for (int f = 0; f < 6; ++f) {
    cube.faces[static_cast<std::size_t>(f)] = rand_tensor({s, s, 3}, rng, 0.0, 1.0);
    cube.masks[static_cast<std::size_t>(f)] = Tensor(Shape{s, s}, 1.0);
  }
  return cube;
}

NFoVView random_view(std::int64_t s, Rng& rng) {
  return {{25.0, -10.0, 90.0}, rand_tensor({s, s, 3}, rng, 0.0, 1.0), Tensor(Shape{s, s}, 1.0)};
}

EquirectImage smooth_panorama(std::int64_t w, std::int64_t h) {
  Tensor px(Shape{h, w, 3});
  auto d = px.data();
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      const Vec3 r = dir_from_equirect(u, v, w, h);
      double* p = d.data() + (v * w + u) * 3;
      p[0] = 0.5 + 0.3 * std::sin(2.0 * r[0] + r[1]);
      p[1] = 0.5 + 0.3 * std::cos(3.0 * r[2] - r[0]);
      p[2] = 0.5 + 0.25 * r[0] * r[2] + 0.2 * r[1];
    }
  return EquirectImage(px);
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> scan_suite(double scale) {
  Collector c("scan", scale);
  c.guard("parallel_vs_sequential", [&] {
    const auto t0 = Clock::now();
    const std::size_t N = 16, D = 8;
    const std::size_t lens[] = {1, 2, 7, 64, 1024};
    double worst = 0;
    for (int cfg = 0; cfg < 20; ++cfg) {
      const std::size_t L = lens[cfg % 5];
      Rng rng(1000 + static_cast<std::uint64_t>(cfg));
      auto a = rand_vec(D * N, rng, -2.0, -0.01);
      auto b = rand_vec(L * N, rng, -1.0, 1.0);
      auto cc = rand_vec(L * N, rng, -1.0, 1.0);
      auto x = rand_vec(L * D, rng, -1.0, 1.0);
      auto dt = rand_vec(L * D, rng, 1e-3, 0.1);
      auto disc = scan::discretize_zoh<double>(a, b, dt, L, D, N);
      auto ys = scan::selective_scan_seq<double>(disc, cc, x);
      auto yp = scan::selective_scan_parallel<double>(disc, cc, x);
      for (std::size_t i = 0; i < ys.size(); ++i) worst = std::max(worst, std::abs(ys[i] - yp[i]));
    }
    const double secs = elapsed(t0);
    c.at_most("parallel_vs_sequential", worst, 1e-10, "20 configs, N=16, D=8");
    c.at_most("parallel_vs_sequential_runtime_s", secs, 10.0);
  });
  c.guard("zoh_growth", [&] {
    std::vector<double> a{1.0}, b{1.0}, dt{std::log(2.0)};
    auto d = scan::discretize_zoh<double>(a, b, dt, 1, 1, 1);
    c.at_most("zoh_growth", std::max(std::abs(d.a_bar[0] - 2.0), std::abs(d.b_bar[0] - 1.0)), 1e-12,
              "A=1, delta=ln2");
  });
  c.guard("zoh_decay", [&] {
    std::vector<double> a{-1.0}, b{1.0}, dt{1.0};
    auto d = scan::discretize_zoh<double>(a, b, dt, 1, 1, 1);
    c.at_most("zoh_decay",
              std::max(std::abs(d.a_bar[0] - std::exp(-1.0)), std::abs(d.b_bar[0] - (1.0 - std::exp(-1.0)))),
              1e-12, "A=-1, delta=1");
  });
  c.guard("zoh_threshold_continuity", [&] {
    auto at = [](double av) {
      std::vector<double> a{av}, b{0.7}, dt{1.0};
      return scan::discretize_zoh<double>(a, b, dt, 1, 1, 1).b_bar[0];
    };
    double worst = 0;
    for (double s : {1.0, -1.0})
      worst = std::max(worst, std::abs(at(s * 0.999e-8) - at(s * 1.001e-8)));
    c.at_most("zoh_threshold_continuity", worst, 1e-10, "either side of |delta A| = 1e-8");
  });
  return c.take();
}

std::vector<CheckResult> grad_suite(double scale) {
  Collector c("grad", scale);
  const auto t0 = Clock::now();
  const std::uint64_t seeds[] = {1, 2, 3};
  auto run = [&](const std::string& name, const std::function<double(std::uint64_t)>& one) {
    c.guard(name, [&] {
      double worst = 0;
      for (auto s : seeds) worst = std::max(worst, one(s));
      c.at_most(name, worst, 1e-4, "max relative error over 3 seeds");
    });
  };
  run("mamba1d", [](std::uint64_t seed) {
    Rng rng(seed);
    MambaBlock block(small_mamba(), rng);
    Tensor seq = rand_tensor({5, 8}, rng), w = rand_tensor({5, 8}, rng);
    seq.set_requires_grad(true);
    ParamList ps;
    block.collect(ps, "m");
    auto all = ps.tensors();
    all.push_back(seq);
    return gradcheck_params([&] { return sum_all(mul(block.forward(seq), w)); }, all, 1e-5);
  });
  run("mamba2d", [](std::uint64_t seed) {
    Rng rng(seed);
    Mamba2DBlock block(small_mamba(), rng);
    Tensor grid = rand_tensor({2, 3, 8}, rng), w = rand_tensor({2, 3, 8}, rng);
    grid.set_requires_grad(true);
    ParamList ps;
    block.collect(ps, "m");
    auto all = ps.tensors();
    all.push_back(grid);
    return gradcheck_params([&] { return sum_all(mul(block.forward(grid), w)); }, all, 1e-5);
  });
  run("vcr", [](std::uint64_t seed) {
    Rng rng(seed);
    Vcr vcr(small_conditioning(), rng);
    Tensor cc = rand_tensor({kClipRows, 8}, rng), w = rand_tensor({kClipRows, 8}, rng);
    cc.set_requires_grad(true);
    ParamList ps;
    vcr.collect(ps, "vcr");
    auto all = ps.tensors();
    all.push_back(cc);
    return gradcheck_params([&] { return sum_all(mul(vcr.forward(cc).c_vcr, w)); }, all, 1e-5, 3, seed);
  });
  run("gma", [](std::uint64_t seed) {
    Rng rng(seed);
    auto cfg = small_conditioning();
    cfg.gma_active_scales = {1, 2, 3, 4};
    Gma gma(cfg, rng);
    auto in = make_gma_inputs(random_view(64, rng), random_cube(64, rng));
    std::array<Tensor, 4> w;
    for (int s = 0; s < 4; ++s)
      w[static_cast<std::size_t>(s)] = rand_tensor({8 >> s, 8 >> s, cfg.unet_widths[static_cast<std::size_t>(s)]}, rng);
    ParamList ps;
    gma.collect(ps, "gma");
    return gradcheck_params(
        [&] {
          auto outs = gma.forward(in);
          Tensor total = sum_all(mul(outs[0], w[0]));
          for (std::size_t s = 1; s < 4; ++s) total = add(total, sum_all(mul(outs[s], w[s])));
          return total;
        },
        ps.tensors(), 1e-5, 2, seed);
  });
  run("unet_width8", [](std::uint64_t seed) {
    Rng rng(seed);
    UNetConfig cfg;
    cfg.base = 8;
    cfg.context_dim = 8;
    UNet net(cfg, rng);
    for (auto& e : net.encoder)
      for (auto& v : e.inject.weight.data()) v = rng.uniform(-0.2, 0.2);
    const auto sched = make_schedule(100, 1e-4, 0.02);
    Tensor z0 = rand_tensor({8, 8, 4}, rng), eps = rand_tensor({8, 8, 4}, rng), ctx = rand_tensor({5, 8}, rng);
    std::array<Tensor, 4> g;
    for (int s = 0; s < 4; ++s) g[static_cast<std::size_t>(s)] = rand_tensor({8 >> s, 8 >> s, cfg.width(s)}, rng);
    ParamList ps;
    net.collect(ps, "unet");
    const EpsModel model = [&](const Tensor& zt, int t) { return net.forward(zt, t, ctx, &g); };
    return gradcheck_params([&] { return eps_loss(model, z0, 40, eps, sched); }, ps.tensors(), 1e-5, 2, seed);
  });
  c.at_most("grad_runtime_s", elapsed(t0), 300.0);
  return c.take();
}

std::vector<CheckResult> geometry_suite(double scale) {
  Collector c("geometry", scale);
  const auto img = smooth_panorama(256, 128);
  c.guard("roundtrip_psnr_db", [&] {
    const auto back = cubemap_to_equirect(equirect_to_cubemap(img, 64), 256, 128);
    const std::int64_t skip = 13;  // 10% of 128 rows
    double se = 0;
    std::size_t n = 0;
    for (std::int64_t v = skip; v < 128 - skip; ++v)
      for (std::int64_t i = 0; i < 256 * 3; ++i) {
        const auto k = static_cast<std::size_t>(v * 256 * 3 + i);
        se += (img.pixels[k] - back.pixels[k]) * (img.pixels[k] - back.pixels[k]);
        ++n;
      }
    c.at_least("roundtrip_psnr_db", 10.0 * std::log10(1.0 / (se / static_cast<double>(n))), 30.0,
               "256x128 -> cube 64 -> 256x128");
  });
  c.guard("wrap_sample_identity", [&] {
    double worst = 0;
    for (double y : {0.0, 7.3, 63.5, 127.0})
      for (double x : {-0.25, -3.5, 0.75}) {
        double a[3], b[3];
        sample_wrap_bilinear(img.pixels, x, y, a);
        sample_wrap_bilinear(img.pixels, x + 256.0, y, b);
        for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
      }
    c.at_most("wrap_sample_identity", worst, 0.0, "x vs x + W");
  });
  c.guard("extract_composite_mean_abs", [&] {
    double worst = 0;
    for (const ViewCoords vc : {ViewCoords{0, 0, 90}, ViewCoords{120, 30, 90}, ViewCoords{-60, -50, 75}}) {
      const auto out = composite_nfov(img, extract_nfov(img, vc, 64));
      double total = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < out.pixels.size(); ++i) {
        total += std::abs(out.pixels[i] - img.pixels[i]);
        n += in_frustum(vc, static_cast<std::int64_t>(i / 3 % 256), static_cast<std::int64_t>(i / 3 / 256), 256, 128);
      }
      worst = std::max(worst, total / static_cast<double>(std::max<std::size_t>(n, 1)));
    }
    c.at_most("extract_composite_mean_abs", worst, 2.0 / 255.0, "mean over frustum pixels");
  });
  return c.take();
}

std::vector<CheckResult> diffusion_suite(double scale) {
  Collector c("diffusion", scale);
  const auto sched = make_schedule(1000, 1e-4, 0.02);
  for (int t : {1, sched.T / 2, sched.T}) {
    const std::string name = "q_sample_variance_t" + std::to_string(t);
    c.guard(name, [&] {
      const std::int64_t n = 100000;
      Rng rng(77 + static_cast<std::uint64_t>(t));
      const Tensor z0(Shape{n}, 0.5);
      const Tensor zt = q_sample(z0, t, randn({n}, rng), sched);
      double mean = 0, var = 0;
      for (double v : zt.data()) mean += v;
      mean /= static_cast<double>(n);
      for (double v : zt.data()) var += (v - mean) * (v - mean);
      var /= static_cast<double>(n - 1);
      const double expect = 1.0 - sched.alpha_bar(t);
      c.at_most(name, std::abs(var / expect - 1.0), 0.02, "relative deviation from 1 - alpha_bar, n=1e5");
    });
  }
  c.guard("cfg_scale1_exact", [&] {
    Rng rng(5);
    const Tensor cond = randn({4, 4, 4}, rng), uncond = randn({4, 4, 4}, rng);
    c.at_most("cfg_scale1_exact", max_abs_diff(cfg_combine(cond, uncond, 1.0), cond), 0.0);
  });
  return c.take();
}

std::vector<CheckResult> vcr_suite(double scale) {
  Collector c("vcr", scale);
  c.guard("vcr", [&] {
    Rng rng(11);
    ConditioningConfig cfg;  // d = 64, eight blocks
    Vocabulary vocab;
    ToyImageEncoder img(cfg, rng);
    ToyTextEncoder txt(vocab.size(), cfg, rng);
    Vcr vcr(cfg, rng);
    const Tensor clip = build_clip_condition(img, txt, vocab, random_cube(64, rng), "a warm scene with 3 boxes");
    c.holds("c_clip_shape_83xd", clip.shape() == Shape{83, cfg.d_model}, shape_str(clip.shape()));
    const auto open = vcr.forward(clip);
    double lo = 1, hi = 0;
    for (double a : open.alpha.data()) lo = std::min(lo, a), hi = std::max(hi, a);
    c.holds("alpha_in_open_unit_interval", lo > 0 && hi < 1);
    Tensor bias = vcr.h2.bias;
    bias.data()[0] = -1e3;
    c.at_most("gate_closed_identity", max_abs_diff(vcr.forward(clip).c_vcr, clip), 1e-6, "alpha -> 0");
    bias.data()[0] = 1e3;
    const auto full = vcr.forward(clip);
    c.at_most("gate_open_identity", max_abs_diff(full.c_vcr, full.c_prime), 1e-6, "alpha -> 1");
  });
  return c.take();
}

std::vector<CheckResult> gma_suite(double scale) {
  Collector c("gma", scale);
  c.guard("output_extents", [&] {
    Rng rng(21);
    auto cfg = small_conditioning();
    Gma gma(cfg, rng);
    bool ok = true;
    std::string seen;
    for (std::int64_t s : {64, 128}) {
      auto outs = gma.forward(make_gma_inputs(random_view(s, rng), random_cube(s, rng)));
      for (int k = 0; k < 4; ++k) {
        const auto ext = s / (8 << k);
        ok = ok && outs[static_cast<std::size_t>(k)].shape() ==
                       Shape{ext, ext, cfg.unet_widths[static_cast<std::size_t>(k)]};
        seen += shape_str(outs[static_cast<std::size_t>(k)].shape()) + " ";
      }
    }
    c.holds("output_extents", ok, seen);
  });
  c.guard("active_set_grid", [&] {
    bool ok = true;
    std::string detail;
    for (const std::vector<int>& active : {std::vector<int>{4}, {3, 4}, {2, 3, 4}, {1, 2, 3, 4}}) {
      Rng rng(22);
      auto cfg = small_conditioning();
      cfg.gma_active_scales = active;
      Gma gma(cfg, rng);
      const auto view = random_view(64, rng);
      const auto a = gma.forward(make_gma_inputs(view, random_cube(64, rng)));
      const auto b = gma.forward(make_gma_inputs(view, random_cube(64, rng)));
      std::string row = "[";
      for (int s = 1; s <= 4; ++s) {
        const bool moved = max_abs_diff(a[static_cast<std::size_t>(s - 1)], b[static_cast<std::size_t>(s - 1)]) > 0;
        ok = ok && moved == gma.is_active(s);
        row += moved ? "g" : "-";
      }
      detail += row + "] ";
    }
    c.holds("active_set_grid", ok, detail + "(g: scale sees the cube faces)");
  });
  c.guard("chain_equals_concat", [&] {
    const std::int64_t D = 4, N = 3;
    const std::vector<std::int64_t> lens{5, 3, 7, 1, 4, 6, 2};
    Rng rng(23);
    std::vector<Tensor> xs, ds, bs, cs;
    for (auto l : lens) {
      xs.push_back(rand_tensor({l, D}, rng));
      ds.push_back(rand_tensor({l, D}, rng, 0.01, 0.3));
      bs.push_back(rand_tensor({l, N}, rng));
      cs.push_back(rand_tensor({l, N}, rng));
    }
    const Tensor a_log = rand_tensor({D, N}, rng);
    const auto full = selective_scan(concat_rows(xs), concat_rows(ds), a_log, concat_rows(bs), concat_rows(cs),
                                     Tensor(), scan::Variant::sequential);
    Tensor h;
    std::vector<Tensor> ys;
    for (std::size_t i = 0; i < lens.size(); ++i) {
      auto so = selective_scan(xs[i], ds[i], a_log, bs[i], cs[i], h, scan::Variant::sequential);
      ys.push_back(so.y);
      h = so.final_state;
    }
    c.at_most("chain_equals_concat",
              std::max(max_abs_diff(concat_rows(ys), full.y), max_abs_diff(h, full.final_state)), 0.0,
              "7 segments chained by state vs one scan");
  });
  c.guard("memoryless_limit", [&] {
    Rng rng(24);
    Gma gma(small_conditioning(), rng);
    for (auto& b : gma.global_local)
      for (auto& v : b.branch.a_log.data()) v = 50.0;
    const auto view = random_view(64, rng);
    const auto a = gma.forward(make_gma_inputs(view, random_cube(64, rng)));
    const auto b = gma.forward(make_gma_inputs(view, random_cube(64, rng)));
    double worst = 0;
    for (std::size_t s = 0; s < 4; ++s) worst = std::max(worst, max_abs_diff(a[s], b[s]));
    c.at_most("memoryless_limit", worst, 0.0, "A_bar -> 0 makes faces irrelevant");
  });
  return c.take();
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"scan", "grad", "geometry", "diffusion", "vcr", "gma"};
  return names;
}

std::vector<CheckResult> run_suite(const std::string& name, double tolerance_scale) {
  if (!(tolerance_scale > 0)) throw ContractError("verify: tolerance scale must be > 0");
  if (name == "all") {
    std::vector<CheckResult> out;
    for (const auto& s : suite_names()) {
      auto part = run_suite(s, tolerance_scale);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (name == "scan") return scan_suite(tolerance_scale);
  if (name == "grad") return grad_suite(tolerance_scale);
  if (name == "geometry") return geometry_suite(tolerance_scale);
  if (name == "diffusion") return diffusion_suite(tolerance_scale);
  if (name == "vcr") return vcr_suite(tolerance_scale);
  if (name == "gma") return gma_suite(tolerance_scale);
  throw ContractError("unknown suite '" + name + "' (scan|grad|geometry|diffusion|vcr|gma|all)");
}

std::string format_results(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "suite" << std::setw(36) << "check" << std::setw(6) << "ok"
     << std::setw(14) << "value" << std::setw(14) << "limit" << "detail\n";
  for (const auto& r : results) {
    os << std::setw(10) << r.suite << std::setw(36) << r.name << std::setw(6) << (r.pass ? "PASS" : "FAIL")
       << std::setw(14) << std::setprecision(6) << r.value << std::setw(14) << r.limit << r.detail << "\n";
  }
  return os.str();
}

BenchRow bench_scan(std::int64_t L, std::int64_t N, std::int64_t D, ScanVariant variant, std::uint64_t seed,
                    unsigned threads) {
  if (L < 1 || N < 1 || D < 1) throw ContractError("bench: L, N and D must be >= 1");
  const auto l = static_cast<std::size_t>(L), n = static_cast<std::size_t>(N), d = static_cast<std::size_t>(D);
  Rng rng(seed);
  auto a = rand_vec(d * n, rng, -2.0, -0.01);
  auto b = rand_vec(l * n, rng, -1.0, 1.0);
  auto c = rand_vec(l * n, rng, -1.0, 1.0);
  auto x = rand_vec(l * d, rng, -1.0, 1.0);
  auto dt = rand_vec(l * d, rng, 1e-3, 0.1);
  const auto t0 = Clock::now();
  auto disc = scan::discretize_zoh<double>(a, b, dt, l, d, n);
  std::vector<double> y(l * d), h;
  scan::selective_scan<double>(disc, c, x, y, h, variant, nullptr, threads);
  const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();
  const auto oracle = scan::selective_scan_seq<double>(disc, c, x);
  double err = 0;
  for (std::size_t i = 0; i < y.size(); ++i) err = std::max(err, std::abs(y[i] - oracle[i]));
  return {L, N, D, variant == ScanVariant::sequential ? "sequential" : "parallel", ns, err};
}

std::string to_csv(const BenchRow& r) {
  std::ostringstream os;
  os << r.L << "," << r.N << "," << r.D << "," << r.variant << "," << r.wall_ns << "," << std::setprecision(6)
     << r.max_abs_err;
  return os.str();
}

}  // namespace opama
