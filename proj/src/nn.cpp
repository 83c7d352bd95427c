#include "moiie/nn.hpp"

#include <cmath>

#include "rng.hpp"

namespace moiie {

namespace {

uint64_t name_seed(uint64_t seed, const char* tag) {
    uint64_t h = 1469598103934665603ull;
    for (const char* p = tag; *p; ++p) {
        h ^= static_cast<uint64_t>(*p);
        h *= 1099511628211ull;
    }
    uint64_t s = seed ^ h;
    return rng::splitmix(s);
}
}  // namespace

void FfnParams::init(int64_t d, Dtype dt, uint64_t seed) {
    w1 = Tensor({d, 4 * d}, dt);
    b1 = Tensor::zeros({4 * d}, dt);
    w2 = Tensor({4 * d, d}, dt);
    b2 = Tensor::zeros({d}, dt);
    rng::fill_normal(w1, 1.0 / std::sqrt(static_cast<double>(d)), name_seed(seed, "w1"));
    rng::fill_normal(w2, 1.0 / std::sqrt(static_cast<double>(4 * d)), name_seed(seed, "w2"));
}

void FfnParams::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w1", &w1});
    out.push_back({prefix + ".b1", &b1});
    out.push_back({prefix + ".w2", &w2});
    out.push_back({prefix + ".b2", &b2});
}

int64_t FfnParams::param_count() const {
    return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

void FfnParams::copy_from(const FfnParams& src) {
    w1 = src.w1;
    b1 = src.b1;
    w2 = src.w2;
    b2 = src.b2;
    w1.clear_grad();
    b1.clear_grad();
    w2.clear_grad();
    b2.clear_grad();
}

Value FfnParams::forward(Tape& t, Value x, bool train) {
    Value h = t.gelu(t.add_bias(t.matmul(x, t.param(w1, train)), t.param(b1, train)));
    return t.add_bias(t.matmul(h, t.param(w2, train)), t.param(b2, train));
}

void AttentionParams::init(int64_t d, Dtype dt, uint64_t seed) {
    norm_gain = Tensor::full({d}, 1.0, dt);
    wq = Tensor({d, d}, dt);
    wk = Tensor({d, d}, dt);
    wv = Tensor({d, d}, dt);
    wo = Tensor({d, d}, dt);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    rng::fill_normal(wq, stddev, name_seed(seed, "wq"));
    rng::fill_normal(wk, stddev, name_seed(seed, "wk"));
    rng::fill_normal(wv, stddev, name_seed(seed, "wv"));
    rng::fill_normal(wo, stddev, name_seed(seed, "wo"));
}

void AttentionParams::collect(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".norm.g", &norm_gain});
    out.push_back({prefix + ".wq", &wq});
    out.push_back({prefix + ".wk", &wk});
    out.push_back({prefix + ".wv", &wv});
    out.push_back({prefix + ".wo", &wo});
}

Value AttentionParams::forward(Tape& t, Value x, int n_heads, int64_t batch, int64_t seq, bool train) {
    Value h = t.rms_norm(x, t.param(norm_gain, train));
    Value q = t.matmul(h, t.param(wq, train));
    Value k = t.matmul(h, t.param(wk, train));
    Value v = t.matmul(h, t.param(wv, train));
    Value a = t.attention(q, k, v, n_heads, batch, seq);
    return t.add(x, t.matmul(a, t.param(wo, train)));
}

}  // namespace moiie
