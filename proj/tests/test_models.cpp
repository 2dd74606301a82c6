#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "support.hpp"

using namespace freqattack;
using Catch::Approx;
using fa_test::random_image;
using fa_test::random_tensor;

namespace {

std::vector<std::size_t> random_coords(std::size_t n, std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> c(count);
    for (auto& i : c) i = static_cast<std::size_t>(rng.below(n));
    return c;
}

double grad_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

} // namespace

TEST_CASE("loss helpers") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(sigmoid(800.0) == 1.0);
    CHECK(bce_loss(0.0, Label::fake) == Approx(std::log(2.0)));
    CHECK(bce_loss(2.0, Label::real) == Approx(-std::log(1.0 - sigmoid(2.0))));
    for (double z : {-30.0, -1.5, 0.0, 0.3, 12.0}) CHECK(bce_loss(z, Label::fake) == bce_loss(-z, Label::real));
    CHECK(bce_loss(-1000.0, Label::fake) == Approx(-std::log(1e-12)));
    CHECK(bce_dlogit(0.0, Label::fake) == -0.5);
    CHECK(bce_dlogit(0.0, Label::real) == 0.5);
    CHECK(predict_from_logit(0.0) == Label::real);
    CHECK(predict_from_logit(1e-9) == Label::fake);
    CHECK_THROWS_AS(bce_loss(std::nan(""), Label::fake), NumericError);
}

TEST_CASE("linear classifier hand-computed logit") {
    LinearSpectralClassifier m(Shape{16, 8, 1}, 8);
    m.weight(0, 0, 0) = 0.5;
    m.bias() = -1.0;
    // Constant 0.5 image: every block has D(0,0) = 8 * 0.5 = 4.
    const Tensor x(Shape{16, 8, 1}, 0.5);
    CHECK(m.logit(x) == Approx(1.0));
    CHECK(m.predict(x) == Label::fake);
    CHECK_THROWS_AS(m.logit(Tensor(Shape{8, 8, 1})), ShapeMismatch);
}

TEST_CASE("linear classifier input gradient is the tiled pixel weight pattern") {
    const auto m = LinearSpectralClassifier::random(Shape{16, 16, 3}, 8, 5, 0.5);
    const Tensor x = random_tensor(Shape{16, 16, 3}, 1);
    const Tensor g = m.logit_grad(x);
    // Affine model: logit(x + t) - logit(x) == <grad, t>.
    const Tensor t = random_tensor(Shape{16, 16, 3}, 2, -1.0, 1.0);
    CHECK(m.logit(x + t) - m.logit(x) == Approx(dot(g, t)).epsilon(1e-10));
    // Every block sees the same pattern.
    for (int y = 0; y < 8; ++y) {
        for (int c = 0; c < 3; ++c) CHECK(g(y, 3, c) == Approx(g(y + 8, 11, c)).epsilon(1e-12));
    }
}

TEST_CASE("input gradients match central finite differences") {
    const Shape s{16, 16, 3};
    const Image x = random_image(s, 3);
    const auto lin = LinearSpectralClassifier::random(s, 8, 1, 0.5);
    const auto cnn = TinyCnnClassifier::random(s, 2);
    const auto coords = random_coords(s.size(), 60, 9);
    for (Label label : {Label::real, Label::fake}) {
        const Tensor gl = lin.grad_input(x, label);
        for (const auto& e : finite_diff_grad(lin, x, label, 1e-5, coords)) {
            CHECK(grad_error(gl[e.index], e.value) < 1e-4);
        }
        const Tensor gc = cnn.grad_input(x, label);
        int checked = 0;
        for (const auto& e : finite_diff_grad(cnn, x, label, 1e-5, coords)) {
            Tensor up = x.tensor(), down = x.tensor();
            up[e.index] += 1e-5;
            down[e.index] -= 1e-5;
            if (cnn.relu_pattern(up) != cnn.relu_pattern(down)) continue;  // straddles a kink
            CHECK(grad_error(gc[e.index], e.value) < 1e-4);
            ++checked;
        }
        CHECK(checked > 40);
    }
}

TEST_CASE("parameter gradients match finite differences") {
    const Shape s{8, 8, 1};
    const Image x = random_image(s, 4);
    std::vector<std::unique_ptr<DifferentiableModel>> models;
    models.push_back(std::make_unique<LinearSpectralClassifier>(LinearSpectralClassifier::random(s, 4, 3, 0.3)));
    models.push_back(std::make_unique<TinyCnnClassifier>(TinyCnnClassifier::random(s, 3)));
    for (auto& m : models) {
        auto params = m->parameters();
        std::vector<double> grad(params.size(), 0.0);
        const double loss = m->accumulate_param_grad(x, Label::fake, grad);
        CHECK(loss == Approx(m->loss(x, Label::fake)));
        for (std::size_t j : random_coords(params.size(), 30, 17)) {
            const double orig = params[j];
            params[j] = orig + 1e-6;
            const double up = m->loss(x, Label::fake);
            params[j] = orig - 1e-6;
            const double down = m->loss(x, Label::fake);
            params[j] = orig;
            CHECK(grad_error(grad[j], (up - down) / 2e-6) < 1e-4);
        }
    }
}

TEST_CASE("tiny cnn shape requirements") {
    CHECK_THROWS_AS(TinyCnnClassifier(Shape{10, 12, 1}), DimensionError);
    CHECK(TinyCnnClassifier(Shape{8, 12, 3}).parameters().size() == TinyCnnClassifier::param_count(3));
}

TEST_CASE("training separates the synthetic classes") {
    const auto& fx = fa_test::trained_linear();
    CHECK(accuracy(*fx.model, fx.data.train) >= 0.95);
    CHECK(accuracy(*fx.model, fx.data.eval) >= 0.95);
}

TEST_CASE("training is deterministic and reduces loss") {
    const auto cfg = fa_test::small_config();
    const auto data = generate_dataset(cfg);
    TrainOptions opt{15, 0.01, 8, 99, Optimizer::adam};
    auto a = LinearSpectralClassifier::random(Shape{32, 32, 1}, 8, 1);
    auto b = a;
    const TrainReport ra = train(a, data.train, &data.eval, opt);
    const TrainReport rb = train(b, data.train, &data.eval, opt);
    CHECK(ra.final_loss < ra.initial_loss);
    CHECK(ra.final_loss == rb.final_loss);
    CHECK(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
    CHECK(ra.epochs_run == 15);

    opt.optimizer = Optimizer::sgd;
    opt.lr = 0.1;
    auto c = LinearSpectralClassifier::random(Shape{32, 32, 1}, 8, 1);
    const TrainReport rc = train(c, data.train, nullptr, opt);
    CHECK(rc.final_loss < rc.initial_loss);
}

TEST_CASE("training preconditions") {
    auto m = LinearSpectralClassifier::random(Shape{8, 8, 1}, 8, 1);
    LabeledDataset empty;
    CHECK_THROWS_AS(train(m, empty, nullptr, {}), PreconditionError);
    LabeledDataset one_label;
    one_label.items.push_back({Image(Shape{8, 8, 1}, 0.5), Label::fake, 0, "a"});
    CHECK_THROWS_AS(train(m, one_label, nullptr, {}), PreconditionError);
    one_label.items.push_back({Image(Shape{8, 8, 1}, 0.4), Label::real, 0, "b"});
    CHECK_THROWS_AS(train(m, one_label, nullptr, {1, -1.0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(train(m, one_label, nullptr, {5, 1e308, 0, 0}), DivergenceError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const Shape s{16, 16, 3};
    const Image x = random_image(s, 8);
    std::vector<std::unique_ptr<DifferentiableModel>> models;
    models.push_back(std::make_unique<LinearSpectralClassifier>(LinearSpectralClassifier::random(s, 8, 3, 0.3)));
    models.push_back(std::make_unique<TinyCnnClassifier>(TinyCnnClassifier::random(s, 3)));
    for (auto& m : models) {
        std::stringstream ss;
        write_checkpoint(ss, *m);
        const auto back = read_checkpoint(ss);
        CHECK(back->kind() == m->kind());
        CHECK(back->architecture() == m->architecture());
        CHECK(back->logit(x) == m->logit(x));
    }
    std::stringstream junk("NOPE and more");
    CHECK_THROWS_AS(read_checkpoint(junk), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/model.fqam"), IoError);
}

TEST_CASE("ensemble modes") {
    const Shape s{8, 8, 1};
    const Image x = random_image(s, 12);
    std::shared_ptr<const GradientOracle> a =
        std::make_shared<LinearSpectralClassifier>(LinearSpectralClassifier::random(s, 8, 1, 1.0));
    std::shared_ptr<const GradientOracle> b =
        std::make_shared<LinearSpectralClassifier>(LinearSpectralClassifier::random(s, 8, 2, 1.0));

    const auto logits = ensemble({a, b}, EnsembleMode::logits);
    const double z = 0.5 * (a->logit(x) + b->logit(x));
    CHECK(logits->logit(x) == Approx(z));
    CHECK(logits->loss(x, Label::fake) == Approx(bce_loss(z, Label::fake)));
    const Tensor gl = logits->grad_input(x, Label::fake);
    const Tensor expect = (a->logit_grad(x) + b->logit_grad(x)) * (0.5 * bce_dlogit(z, Label::fake));
    CHECK(max_abs_diff(gl, expect) < 1e-12);

    const auto loss = ensemble({a, b}, EnsembleMode::loss);
    CHECK(loss->loss(x, Label::fake) == Approx(0.5 * (a->loss(x, Label::fake) + b->loss(x, Label::fake))));
    const Tensor gm = (a->grad_input(x, Label::fake) + b->grad_input(x, Label::fake)) * 0.5;
    CHECK(max_abs_diff(loss->grad_input(x, Label::fake), gm) < 1e-12);

    const auto pixel = ensemble({a, b}, EnsembleMode::pixel);
    const Tensor gp = pixel->grad_input(x, Label::fake);
    const Tensor sa = sign(a->grad_input(x, Label::fake)), sb = sign(b->grad_input(x, Label::fake));
    for (std::size_t i = 0; i < gp.size(); ++i) {
        CHECK(gp[i] == 0.5 * (sa[i] + sb[i]));
        CHECK((gp[i] == -1.0 || gp[i] == 0.0 || gp[i] == 1.0));
    }
    // Every mode predicts from the mean logit.
    CHECK(pixel->predict(x) == predict_from_logit(z));

    // A single-member logits ensemble is its member.
    const auto solo = ensemble({a}, EnsembleMode::logits);
    CHECK(solo->loss(x, Label::real) == Approx(a->loss(x, Label::real)));

    CHECK_THROWS_AS(ensemble({}, EnsembleMode::logits), EmptyEnsemble);
    std::shared_ptr<const GradientOracle> other =
        std::make_shared<LinearSpectralClassifier>(LinearSpectralClassifier::random(Shape{16, 8, 1}, 8, 2));
    CHECK_THROWS_AS(ensemble({a, other}, EnsembleMode::loss), ShapeMismatch);
    CHECK(ensemble_mode_from_string("pixel") == EnsembleMode::pixel);
}
