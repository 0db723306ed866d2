// SPDX-License-Identifier: Apache-2.0
#include "ww/steer.hpp"

#include <algorithm>
#include <cmath>

namespace ww {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void project_out(std::vector<double>& a, std::span<const double> u) {
    const double c = dot(a, u);
    for (size_t i = 0; i < a.size(); ++i) a[i] -= c * u[i];
}

double cosine_dd(std::span<const double> a, std::span<const double> u) {
    const double n2 = dot(a, a);
    if (n2 == 0.0) return 0.0;
    return std::clamp(dot(a, u) / std::sqrt(n2), -1.0, 1.0);
}

// Internal tolerance sits well below the 1e-6 contract so f32 storage of the
// result stays inside it.
constexpr double kReprojectTol = 1e-9;
constexpr int kReprojectMaxIters = 8;

std::vector<std::vector<double>> span_basis(const std::vector<std::span<const double>>& active) {
    std::vector<std::vector<double>> basis;
    for (auto u : active) {
        std::vector<double> q(u.begin(), u.end());
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& b : basis) project_out(q, b);
        const double n = std::sqrt(dot(q, q));
        if (n < 1e-8) continue;
        for (double& x : q) x /= n;
        basis.push_back(std::move(q));
    }
    return basis;
}

void reproject(std::vector<double>& a, const std::vector<std::span<const double>>& active, double norm_in) {
    // Active directions spanning the whole space leave nothing.
    if (active.size() >= a.size() && span_basis(active).size() == a.size()) {
        std::fill(a.begin(), a.end(), 0.0);
        return;
    }
    const double tol = kReprojectTol * norm_in;
    auto worst = [&] {
        double w = 0.0;
        for (auto u : active) w = std::max(w, std::abs(dot(a, u)));
        return w;
    };
    if (worst() <= tol) return;
    for (int it = 0; it < kReprojectMaxIters; ++it) {
        for (auto u : active) project_out(a, u);
        if (worst() <= tol) return;
    }
    // Nearly parallel directions converge slowly under alternating
    // projections; project onto the complement of their span directly.
    const auto basis = span_basis(active);
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& b : basis) project_out(a, b);
}

} // namespace

std::vector<float> orthogonalize(std::span<const float> a, std::span<const float> u) {
    if (a.size() != u.size()) throw ShapeError("orthogonalize: length mismatch");
    double n2 = 0.0;
    for (float x : u) n2 += double(x) * double(x);
    if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw NumericError("orthogonalize: direction is not unit norm");
    double c = 0.0;
    for (size_t i = 0; i < a.size(); ++i) c += double(a[i]) * double(u[i]);
    std::vector<float> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(double(a[i]) - c * double(u[i]));
    return out;
}

bool SteerSet::add(const DirectionKey& key) {
    if (!members_.insert(key).second) return false;
    order_.push_back(key);
    by_layer_[key.layer].push_back(key);
    return true;
}

std::span<const DirectionKey> SteerSet::at_layer(uint32_t layer) const {
    auto it = by_layer_.find(layer);
    if (it == by_layer_.end()) return {};
    return it->second;
}

void SteerSet::clear() {
    members_.clear();
    order_.clear();
    by_layer_.clear();
}

SteerOutcome steer_record(const DirectionIndex& index, const MonitorState& state, SteerSet& steer_set,
                          const TokenRecord& record, uint64_t token_index, Phase phase) {
    check_compatible(index, state);
    if (record.d_model != index.d_model() || record.values.size() != size_t{index.n_layers()} * index.d_model())
        throw ShapeError("token " + std::to_string(token_index) + ": record shape does not match bundle");
    SteerOutcome out;
    out.record = record;
    const auto role = static_cast<size_t>(record.role);

    for (uint32_t l = 0; l < index.n_layers(); ++l) {
        const auto dirs = index.at_layer(l);
        if (dirs.empty()) continue;
        const auto src = record.layer(l);
        std::vector<double> a(src.begin(), src.end());
        const double norm_in = std::sqrt(dot(a, a));
        bool changed = false;

        for (const auto& key : steer_set.at_layer(l)) {
            project_out(a, index.find(key)->u);
            changed = true;
        }
        for (const auto& d : dirs) {
            if (steer_set.contains(d.key)) continue;
            const auto s = static_cast<float>(cosine_dd(a, d.u));
            const auto hit = check_range(state.ranges.at(d.key).roles[role], s, state.epsilon);
            if (!hit) continue;
            out.events.push_back({token_index, record.role, d.key, s, hit->first, hit->second, phase});
            steer_set.add(d.key);
            out.newly_triggered.push_back(d.key);
            project_out(a, d.u);
            changed = true;
        }
        if (!changed) continue;

        auto project_active = [&] {
            std::vector<std::span<const double>> active;
            for (const auto& key : steer_set.at_layer(l)) active.emplace_back(index.find(key)->u);
            reproject(a, active, norm_in);
        };
        project_active();
        // Later projections can push an earlier-checked direction out of range.
        for (bool grew = true; grew;) {
            grew = false;
            for (const auto& d : dirs) {
                if (steer_set.contains(d.key)) continue;
                const auto s = static_cast<float>(cosine_dd(a, d.u));
                const auto hit = check_range(state.ranges.at(d.key).roles[role], s, state.epsilon);
                if (!hit) continue;
                out.events.push_back({token_index, record.role, d.key, s, hit->first, hit->second, phase});
                steer_set.add(d.key);
                out.newly_triggered.push_back(d.key);
                project_out(a, d.u);
                grew = true;
            }
            if (grew) project_active();
        }
        auto dst = out.record.layer(l);
        for (size_t i = 0; i < a.size(); ++i) dst[i] = static_cast<float>(a[i]);
        out.record.flags |= 1;
    }
    return out;
}

StreamSteerer::StreamSteerer(const DirectionIndex& index, const MonitorState& state, std::string trace_id)
    : index_(index), state_(state) {
    check_compatible(index, state);
    report_.trace_id = std::move(trace_id);
    report_.mode = Mode::steer;
}

SteerOutcome StreamSteerer::feed(const TokenRecord& record) {
    const Phase phase = (seen_assistant_ || record.role == Role::assistant) ? Phase::completion : Phase::prompt;
    if (record.role == Role::assistant) seen_assistant_ = true;
    SteerOutcome out = steer_record(index_, state_, set_, record, report_.tokens, phase);
    ++report_.tokens;
    if (phase == Phase::prompt) ++report_.prompt_tokens;
    for (const auto& e : out.events) {
        ++report_.tallies[e.key];
        if (e.phase == Phase::prompt) report_.flagged_prompt = true;
        report_.flagged_completion = true;
        report_.events.push_back(e);
    }
    for (const auto& k : out.newly_triggered) report_.steering_triggered.push_back(k);
    return out;
}

SteeredTrace steer_trace(const DirectionIndex& index, const MonitorState& state, const ActivationTrace& trace,
                         std::string trace_id) {
    StreamSteerer steerer(index, state, std::move(trace_id));
    SteeredTrace out;
    out.trace.header = trace.header;
    out.trace.header.notes = trace.header.notes.empty() ? "steered" : trace.header.notes + "; steered";
    for (const auto& t : trace.tokens) out.trace.tokens.push_back(steerer.feed(t).record);
    out.report = std::move(steerer.report());
    return out;
}

} // namespace ww
