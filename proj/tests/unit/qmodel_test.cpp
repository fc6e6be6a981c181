#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "oracles.hpp"
#include "saap/qmodel.hpp"
#include "saap/synthdata.hpp"

using namespace saap;

namespace {

QModel zero_model(std::size_t d, std::size_t h, std::size_t C) {
    QModel m;
    m.w1 = Mat(d, h);
    m.b1 = Mat(1, h);
    m.bn_gamma = Mat(1, h);
    m.bn_beta = Mat(1, h);
    m.bn_run_mean = Mat(1, h);
    m.bn_run_var = Mat(1, h);
    for (std::size_t j = 0; j < h; ++j) m.bn_run_var.data[j] = 1.0;
    m.w2 = Mat(h, C);
    m.b2 = Mat(1, C);
    return m;
}

Mat random_distribution_rows(Rng& rng, std::size_t rows, std::size_t cols) {
    Mat t(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            t.at(i, j) = std::exp(rng.normal());
            z += t.at(i, j);
        }
        for (std::size_t j = 0; j < cols; ++j) t.at(i, j) /= z;
    }
    return t;
}

} // namespace

TEST_CASE("zero weights produce the uniform distribution") {
    QModel m = zero_model(6, 4, 8);
    Rng rng(1);
    TensorBlock q = oracles::random_block(rng, 3, 6);
    TensorBlock p = qmodel_forward(m, q);
    for (std::size_t i = 0; i < p.rows; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(p.at(i, j) == doctest::Approx(1.0 / 8.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("eval-mode rows do not depend on batch composition") {
    Rng rng(2);
    QModel m = qmodel_init(8, 16, 10, rng);
    TensorBlock batch = oracles::random_block(rng, 7, 8);

    TensorBlock together = qmodel_forward(m, batch);
    for (std::size_t i = 0; i < batch.rows; ++i) {
        TensorBlock one(1, 8);
        for (std::size_t j = 0; j < 8; ++j) one.at(0, j) = batch.at(i, j);
        TensorBlock alone = qmodel_forward(m, one);
        for (std::size_t j = 0; j < 10; ++j) {
            CHECK(std::abs(alone.at(0, j) - together.at(i, j)) <= 1e-7);
        }
    }
}

TEST_CASE("forward rows are probability distributions") {
    Rng rng(3);
    QModel m = qmodel_init(12, 24, 32, rng);
    TensorBlock q = oracles::random_block(rng, 20, 12, 3.0);

    SUBCASE("eval mode") {
        TensorBlock p = qmodel_forward(m, q);
        for (std::size_t i = 0; i < p.rows; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < p.dim; ++j) {
                CHECK(p.at(i, j) >= 0.0f);
                sum += p.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-5);
        }
    }

    SUBCASE("train mode") {
        TensorBlock p = qmodel_forward(m, q, ForwardMode::train);
        for (std::size_t i = 0; i < p.rows; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < p.dim; ++j) sum += p.at(i, j);
            CHECK(std::abs(sum - 1.0) <= 1e-5);
        }
    }
}

TEST_CASE("train-mode forward rejects single-row batches") {
    Rng rng(4);
    QModel m = qmodel_init(4, 8, 4, rng);
    TensorBlock q = oracles::random_block(rng, 1, 4);
    CHECK_THROWS_AS(qmodel_forward(m, q, ForwardMode::train), std::invalid_argument);
}

TEST_CASE("attention_target on degenerate key sets") {
    Rng rng(5);
    TensorBlock q = oracles::random_block(rng, 3, 4);

    SUBCASE("one key is a one-hot target") {
        TensorBlock k = oracles::random_block(rng, 1, 4);
        KeyAssignment a;
        a.bucket_of = {2};
        TensorBlock t = attention_target(q, k, a, 5);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 5; ++j) {
                CHECK(t.at(i, j) == doctest::Approx(j == 2 ? 1.0 : 0.0).epsilon(1e-9));
            }
        }
    }

    SUBCASE("two identical keys split the mass evenly") {
        TensorBlock k(2, 4);
        for (std::size_t j = 0; j < 4; ++j) k.at(0, j) = k.at(1, j) = static_cast<float>(j) - 1.5f;
        KeyAssignment a;
        a.bucket_of = {0, 1};
        TensorBlock t = attention_target(q, k, a, 2);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(t.at(i, 0) == doctest::Approx(0.5).epsilon(1e-9));
            CHECK(t.at(i, 1) == doctest::Approx(0.5).epsilon(1e-9));
        }
    }

    SUBCASE("empty key set is rejected") {
        TensorBlock k(0, 4);
        KeyAssignment a;
        CHECK_THROWS_AS(attention_target(q, k, a, 2), std::invalid_argument);
    }
}

TEST_CASE("attention_target matches the dense matrix product") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t n_q = 1 + rng.below(8);
        std::size_t n_k = 1 + rng.below(40);
        std::size_t C = 1 + rng.below(6);
        TensorBlock q = oracles::random_block(rng, n_q, 8, 2.0);
        TensorBlock k = oracles::random_block(rng, n_k, 8, 2.0);
        KeyAssignment a;
        a.bucket_of.resize(n_k);
        for (auto& b : a.bucket_of) b = static_cast<std::uint32_t>(rng.below(C));

        Mat got = attention_target_rows(q, k, a, C);
        Mat want = oracles::naive_attention_target(q, k, a, C);
        for (std::size_t i = 0; i < n_q; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < C; ++j) {
                CHECK(std::abs(got.at(i, j) - want.at(i, j)) <= 1e-6);
                sum += got.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("kl_loss analytic cases") {
    Rng rng(7);
    Mat p = random_distribution_rows(rng, 4, 6);
    CHECK(kl_loss(p, p) <= 1e-10);

    // one-hot target against a uniform prediction
    Mat uniform(3, 8), onehot(3, 8);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 8; ++j) uniform.at(i, j) = 1.0 / 8.0;
        onehot.at(i, (i * 3) % 8) = 1.0;
    }
    CHECK(kl_loss(uniform, onehot) == doctest::Approx(std::log(8.0)).epsilon(1e-9));

    Mat other = random_distribution_rows(rng, 4, 6);
    double direct = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            double t = other.at(i, j);
            if (t > 0.0) direct += t * (std::log(t) - std::log(p.at(i, j)));
        }
    }
    direct /= 4.0;
    CHECK(kl_loss(p, other) == doctest::Approx(direct).epsilon(1e-8));
    CHECK(kl_loss(p, other) >= 0.0);

    Mat wrong(4, 5);
    CHECK_THROWS_AS(kl_loss(p, wrong), std::invalid_argument);
}

TEST_CASE("analytic gradients match finite differences on a tiny net") {
    Rng rng(8);
    QModel m = qmodel_init(4, 8, 4, rng);
    TensorBlock q = oracles::random_block(rng, 16, 4);
    Mat target = random_distribution_rows(rng, 16, 4);
    CHECK(oracles::grad_check_worst(m, q, target) <= 1e-3);
}

TEST_CASE("learning rate 0 leaves parameters untouched") {
    Rng rng(9);
    QModel m = qmodel_init(4, 8, 4, rng);
    QModel before = m;
    TrainerState state;
    state.lr = 0.0;
    TensorBlock q = oracles::random_block(rng, 8, 4);
    Mat target = random_distribution_rows(rng, 8, 4);
    train_step_on_target(m, state, q, target);

    std::vector<Mat*> now = param_refs(m);
    std::vector<Mat*> was = param_refs(before);
    for (std::size_t p = 0; p < now.size(); ++p) {
        REQUIRE(now[p]->data.size() == was[p]->data.size());
        for (std::size_t e = 0; e < now[p]->data.size(); ++e) {
            CHECK(now[p]->data[e] == was[p]->data[e]);
        }
    }
    CHECK(state.step == 1);
}

TEST_CASE("training reduces the loss on a fixed task") {
    Rng rng(10);
    QModel m = qmodel_init(8, 16, 8, rng);
    TrainerState state;
    state.lr = 1e-3;
    TensorBlock q = oracles::random_block(rng, 64, 8);
    Mat target = random_distribution_rows(rng, 64, 8);

    double first = 0.0;
    double last = 0.0;
    for (int step = 0; step < 300; ++step) {
        double loss = train_step_on_target(m, state, q, target);
        if (step == 0) first = loss;
        last = loss;
    }
    CHECK(last < first);
}

TEST_CASE("non-finite loss aborts the step") {
    Rng rng(11);
    QModel m = qmodel_init(4, 8, 4, rng);
    TrainerState state;
    TensorBlock q = oracles::random_block(rng, 4, 4);
    Mat target(4, 4);
    for (std::size_t i = 0; i < 4; ++i) {
        target.at(i, 0) = std::numeric_limits<double>::infinity();
    }
    CHECK_THROWS_AS(train_step_on_target(m, state, q, target), std::runtime_error);
}

TEST_CASE("sample_long_range keeps only far-away argmax keys") {
    std::vector<std::uint64_t> qpos{3000, 3001};
    std::vector<std::uint64_t> kpos{2995, 100};
    TensorBlock scores(2, 2);
    // query 0 peaks on the key 5 positions back, query 1 on the key 2901 back
    scores.at(0, 0) = 5.0f;
    scores.at(0, 1) = 1.0f;
    scores.at(1, 0) = 0.5f;
    scores.at(1, 1) = 4.0f;
    auto kept = sample_long_range(qpos, kpos, scores, 1024);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0] == 1);
}

TEST_CASE("retained fraction tracks the planted long-range fraction") {
    HeadSpec spec;
    spec.local_boost = 25.0; // non-planted queries become local lookups
    spec.seed = 77;
    const std::size_t n_keys = 8192;
    const std::size_t n_q = 256;
    SyntheticPrompt prompt = generate_prompt(spec, n_keys, n_q);

    // score queries against the non-sink keys, as the trainer does
    TensorBlock keys_ns(n_keys - 1, spec.dim);
    std::copy(prompt.keys_roped.data.begin() + static_cast<std::ptrdiff_t>(spec.dim),
              prompt.keys_roped.data.end(), keys_ns.data.begin());
    TensorBlock scores =
            matmul_scaled(prompt.queries_roped, keys_ns, 1.0 / std::sqrt(double(spec.dim)));
    std::span<const std::uint64_t> kpos(prompt.key_positions.data() + 1, n_keys - 1);

    auto kept = sample_long_range(prompt.query_positions, kpos, scores, spec.longrange_threshold);
    double fraction = static_cast<double>(kept.size()) / static_cast<double>(n_q);
    CHECK(fraction >= spec.planted_longrange_fraction - 0.10);
    CHECK(fraction <= spec.planted_longrange_fraction + 0.10);
}

TEST_CASE("batched_bucket_select reduces to single-query selection") {
    Rng rng(12);
    QModel m = qmodel_init(8, 16, 12, rng);
    TensorBlock q1 = oracles::random_block(rng, 1, 8);

    auto picks = batched_bucket_select(m, q1, 5);
    REQUIRE(picks.size() == 5);

    // oracle: sort bucket ids by (probability desc, id asc)
    TensorBlock p = qmodel_forward(m, q1);
    std::vector<std::uint32_t> order(12);
    for (std::uint32_t c = 0; c < 12; ++c) order[c] = c;
    std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (p.at(0, a) != p.at(0, b)) return p.at(0, a) > p.at(0, b);
        return a < b;
    });
    for (std::size_t i = 0; i < 5; ++i) CHECK(picks[i] == order[i]);

    // four copies of the same query select the same buckets
    TensorBlock q4(4, 8);
    for (std::size_t g = 0; g < 4; ++g) {
        for (std::size_t j = 0; j < 8; ++j) q4.at(g, j) = q1.at(0, j);
    }
    CHECK(batched_bucket_select(m, q4, 5) == picks);
}

TEST_CASE("batched_bucket_select matches the summed-distribution oracle") {
    Rng rng(13);
    QModel m = qmodel_init(8, 16, 20, rng);
    for (int trial = 0; trial < 10; ++trial) {
        std::size_t G = 1 + rng.below(4);
        std::size_t l = 1 + rng.below(20);
        TensorBlock g = oracles::random_block(rng, G, 8, 2.0);

        TensorBlock p = qmodel_forward(m, g);
        std::vector<double> summed(20, 0.0);
        for (std::size_t i = 0; i < G; ++i) {
            for (std::size_t c = 0; c < 20; ++c) summed[c] += p.at(i, c);
        }
        std::vector<std::uint32_t> order(20);
        for (std::uint32_t c = 0; c < 20; ++c) order[c] = c;
        std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
            if (summed[a] != summed[b]) return summed[a] > summed[b];
            return a < b;
        });
        order.resize(l);
        CHECK(batched_bucket_select(m, g, l) == order);
    }
}

TEST_CASE("batched_bucket_select validates l and breaks ties by id") {
    Rng rng(14);
    QModel uniform = zero_model(4, 8, 6);
    TensorBlock q = oracles::random_block(rng, 2, 4);
    CHECK_THROWS_AS(batched_bucket_select(qmodel_init(4, 8, 6, rng), q, 7),
                    std::invalid_argument);
    // uniform scores: the smallest bucket ids win
    CHECK(batched_bucket_select(uniform, q, 3) == std::vector<std::uint32_t>{0, 1, 2});
}

TEST_CASE("checkpoints round trip through the f32 format") {
    oracles::TempDir dir("qmodel_io");
    Rng rng(15);
    QModel m = qmodel_init(6, 12, 10, rng);
    // push the running stats away from their init values
    TrainerState state;
    state.lr = 1e-3;
    TensorBlock q = oracles::random_block(rng, 16, 6);
    Mat target = random_distribution_rows(rng, 16, 10);
    for (int i = 0; i < 5; ++i) train_step_on_target(m, state, q, target);

    qmodel_save(m, dir.path());
    QModel back = qmodel_load(dir.path());
    REQUIRE(back.dim() == m.dim());
    REQUIRE(back.hidden() == m.hidden());
    REQUIRE(back.n_buckets() == m.n_buckets());

    TensorBlock eval = oracles::random_block(rng, 8, 6);
    TensorBlock a = qmodel_forward(m, eval);
    TensorBlock b = qmodel_forward(back, eval);
    CHECK(oracles::max_abs_diff(a, b) <= 1e-6); // parameters pass through f32
}
