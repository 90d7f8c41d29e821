#include "fedtp/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "fedtp/checkpoint.hpp"
#include "fedtp/rng.hpp"

namespace fedtp {

namespace fs = std::filesystem;

int LabeledDataset::sample_dim() const {
    return kind == DataKind::image ? channels * height * width : seq_len + 1;
}

Tensor LabeledDataset::image_tensor(int i) const {
    if (kind != DataKind::image) throw std::logic_error("image_tensor on a sequence dataset");
    Tensor t({channels, height, width});
    std::copy_n(sample(i), sample_dim(), t.data.data());
    return t;
}

std::uint64_t LabeledDataset::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    mix(static_cast<std::uint64_t>(kind));
    mix(static_cast<std::uint64_t>(channels));
    mix(static_cast<std::uint64_t>(height));
    mix(static_cast<std::uint64_t>(width));
    mix(static_cast<std::uint64_t>(seq_len));
    mix(static_cast<std::uint64_t>(vocab));
    mix(static_cast<std::uint64_t>(num_classes));
    mix(static_cast<std::uint64_t>(labels.size()));
    for (int v : labels) mix(static_cast<std::uint64_t>(v));
    for (int v : coarse) mix(static_cast<std::uint64_t>(v));
    for (double v : data) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, 8);
        mix(bits);
    }
    return h;
}

void LabeledDataset::validate() const {
    if (static_cast<std::int64_t>(data.size()) != static_cast<std::int64_t>(labels.size()) * sample_dim())
        throw std::invalid_argument("dataset: data length does not match sample count");
    for (int v : labels)
        if (v < 0 || v >= num_classes) throw std::invalid_argument("dataset: label out of range");
    if (!coarse.empty()) {
        if (coarse.size() != labels.size()) throw std::invalid_argument("dataset: coarse label count mismatch");
        for (int v : coarse)
            if (v < 0 || v >= num_coarse) throw std::invalid_argument("dataset: coarse label out of range");
    }
}

// ---------------------------------------------------------------------------
// CIFAR binary layout
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
    std::streamsize n = is.tellg();
    is.seekg(0);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), n);
    if (!is) throw std::runtime_error("read failed for '" + path + "'");
    return buf;
}

void append_cifar_records(LabeledDataset& ds, const std::string& path, bool has_coarse) {
    const std::size_t record = has_coarse ? 3074 : 3073;
    std::vector<unsigned char> buf = read_file(path);
    if (buf.empty() || buf.size() % record != 0)
        throw std::runtime_error("'" + path + "': expected a multiple of " + std::to_string(record) +
                                 " bytes, got " + std::to_string(buf.size()));
    const std::size_t n = buf.size() / record;
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* r = buf.data() + i * record;
        if (has_coarse) {
            ds.coarse.push_back(static_cast<int>(r[0]));
            ds.labels.push_back(static_cast<int>(r[1]));
        } else {
            ds.labels.push_back(static_cast<int>(r[0]));
        }
        const unsigned char* px = r + (has_coarse ? 2 : 1);
        for (std::size_t p = 0; p < 3072; ++p) ds.data.push_back(static_cast<double>(px[p]) / 255.0);
    }
}

}  // namespace

LabeledDataset load_cifar(const std::string& path, CifarVariant variant) {
    LabeledDataset ds;
    ds.kind = DataKind::image;
    ds.channels = 3;
    ds.height = 32;
    ds.width = 32;
    bool coarse = variant == CifarVariant::cifar100;
    ds.num_classes = coarse ? 100 : 10;
    ds.num_coarse = coarse ? 20 : 0;

    std::vector<std::string> files;
    if (fs::is_directory(path)) {
        if (coarse) {
            files = {path + "/train.bin", path + "/test.bin"};
        } else {
            for (int i = 1; i <= 5; ++i) files.push_back(path + "/data_batch_" + std::to_string(i) + ".bin");
            files.push_back(path + "/test_batch.bin");
        }
        std::vector<std::string> present;
        for (const auto& f : files)
            if (fs::exists(f)) present.push_back(f);
        if (present.empty()) throw std::runtime_error("no CIFAR batch files found under '" + path + "'");
        files = std::move(present);
    } else {
        files = {path};
    }
    for (const auto& f : files) append_cifar_records(ds, f, coarse);
    for (int v : ds.labels)
        if (v < 0 || v >= ds.num_classes)
            throw std::runtime_error("CIFAR label out of range in '" + path + "'");
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic generators
// ---------------------------------------------------------------------------

LabeledDataset synth_image_task(int num_classes, int per_class, int extent, std::uint64_t seed) {
    if (num_classes < 2 || per_class < 1 || extent < 4)
        throw std::invalid_argument("synth_image_task: need >= 2 classes, >= 1 per class, extent >= 4");
    LabeledDataset ds;
    ds.kind = DataKind::image;
    ds.channels = 1;
    ds.height = extent;
    ds.width = extent;
    ds.num_classes = num_classes;
    // pairs of classes share an orientation family, giving a coarse hierarchy
    ds.num_coarse = (num_classes + 1) / 2;

    const double pi = 3.14159265358979323846;
    for (int c = 0; c < num_classes; ++c) {
        double angle = pi * static_cast<double>(c % 4) / 4.0;
        double freq = 2.0 + 2.0 * static_cast<double>(c / 4);
        double ca = std::cos(angle), sa = std::sin(angle);
        Rng rng(derive_seed(seed, "synth_image", static_cast<std::uint64_t>(c)));
        for (int s = 0; s < per_class; ++s) {
            double phase = rng.uniform(0.0, 2.0 * pi);
            for (int y = 0; y < extent; ++y) {
                for (int x = 0; x < extent; ++x) {
                    double u = (x * ca + y * sa) / extent;
                    double v = 0.5 + 0.35 * std::sin(2.0 * pi * freq * u + phase) + rng.normal(0.0, 0.08);
                    ds.data.push_back(std::clamp(v, 0.0, 1.0));
                }
            }
            ds.labels.push_back(c);
            ds.coarse.push_back(c / 2);
        }
    }
    ds.validate();
    return ds;
}

std::vector<double> char_style_chain(int vocab, int style, std::uint64_t seed) {
    if (vocab < 2) throw std::invalid_argument("char_style_chain: vocab must be >= 2");
    Rng rng(derive_seed(seed, "char_chain", static_cast<std::uint64_t>(style)));
    int a = 2 * rng.uniform_int(vocab / 2) + 1;  // odd multiplier keeps the map a permutation
    int b = rng.uniform_int(vocab);
    std::vector<double> t(static_cast<std::size_t>(vocab) * vocab);
    for (int i = 0; i < vocab; ++i) {
        int hot = (a * i + b) % vocab;
        double sum = 0.0;
        for (int j = 0; j < vocab; ++j) {
            double v = 0.15 * rng.uniform() + (j == hot ? 0.85 : 0.0);
            t[static_cast<std::size_t>(i) * vocab + j] = v;
            sum += v;
        }
        for (int j = 0; j < vocab; ++j) t[static_cast<std::size_t>(i) * vocab + j] /= sum;
    }
    return t;
}

LabeledDataset synth_char_task(int vocab, int seq_len, int num_styles, int per_style, std::uint64_t seed) {
    if (vocab < 2) throw std::invalid_argument("synth_char_task: vocab must be >= 2");
    if (seq_len < 2 || num_styles < 1 || per_style < 1)
        throw std::invalid_argument("synth_char_task: invalid sizes");
    LabeledDataset ds;
    ds.kind = DataKind::sequence;
    ds.seq_len = seq_len;
    ds.vocab = vocab;
    ds.num_classes = num_styles;

    for (int s = 0; s < num_styles; ++s) {
        std::vector<double> chain = char_style_chain(vocab, s, seed);
        Rng rng(derive_seed(seed, "char_seq", static_cast<std::uint64_t>(s)));
        for (int k = 0; k < per_style; ++k) {
            int cur = rng.uniform_int(vocab);
            ds.data.push_back(static_cast<double>(cur));
            for (int t = 0; t < seq_len; ++t) {
                double u = rng.uniform();
                const double* row = chain.data() + static_cast<std::ptrdiff_t>(cur) * vocab;
                double acc = 0.0;
                int nxt = vocab - 1;
                for (int j = 0; j < vocab; ++j) {
                    acc += row[j];
                    if (u < acc) {
                        nxt = j;
                        break;
                    }
                }
                ds.data.push_back(static_cast<double>(nxt));
                cur = nxt;
            }
            ds.labels.push_back(s);
        }
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// partitioning
// ---------------------------------------------------------------------------

namespace {

// counts_i >= 0 summing exactly to total, proportional to props
std::vector<int> largest_remainder(const std::vector<double>& props, int total) {
    std::size_t n = props.size();
    std::vector<int> counts(n, 0);
    std::vector<std::pair<double, std::size_t>> rem(n);
    int used = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double q = props[i] * total;
        counts[i] = static_cast<int>(std::floor(q + 1e-12));
        used += counts[i];
        rem[i] = {q - counts[i], i};
    }
    std::stable_sort(rem.begin(), rem.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int k = 0; k < total - used; ++k) counts[rem[static_cast<std::size_t>(k) % n].second] += 1;
    return counts;
}

std::vector<std::vector<int>> indices_by_class(const LabeledDataset& ds) {
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (int i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    return by_class;
}

// stratified 80/20 split; largest-remainder over the per-class 20% quotas
void split_train_test(const LabeledDataset& ds, const std::vector<int>& assigned, Rng& rng,
                      std::vector<int>& train, std::vector<int>& test) {
    std::map<int, std::vector<int>> by_class;
    for (int idx : assigned) by_class[ds.labels[static_cast<std::size_t>(idx)]].push_back(idx);

    int total = static_cast<int>(assigned.size());
    int want_test = static_cast<int>(std::lround(0.2 * total));
    std::vector<double> props;
    std::vector<const std::vector<int>*> groups;
    int floor_sum = 0, ceil_sum = 0;
    for (auto& [cls, idxs] : by_class) {
        (void)cls;
        props.push_back(static_cast<double>(idxs.size()) / total);
        groups.push_back(&idxs);
        floor_sum += static_cast<int>(std::floor(0.2 * idxs.size() + 1e-12));
        ceil_sum += static_cast<int>(std::ceil(0.2 * idxs.size() - 1e-12));
    }
    want_test = std::clamp(want_test, floor_sum, ceil_sum);
    std::vector<double> test_props(props.size());
    for (std::size_t i = 0; i < props.size(); ++i) test_props[i] = 0.2 * groups[i]->size();
    // reuse largest_remainder on raw quotas by normalizing to want_test
    std::vector<int> test_counts;
    {
        double qsum = 0.0;
        for (double q : test_props) qsum += q;
        std::vector<double> norm(test_props.size());
        for (std::size_t i = 0; i < test_props.size(); ++i) norm[i] = qsum > 0 ? test_props[i] / qsum : 0.0;
        test_counts = largest_remainder(norm, want_test);
    }
    // every client needs a test sample for evaluation
    if (want_test == 0 && total >= 2) {
        std::size_t biggest = 0;
        for (std::size_t i = 1; i < groups.size(); ++i)
            if (groups[i]->size() > groups[biggest]->size()) biggest = i;
        test_counts[biggest] = 1;
    }

    train.clear();
    test.clear();
    std::size_t gi = 0;
    for (auto& [cls, idxs] : by_class) {
        (void)cls;
        std::vector<int> shuffled = idxs;
        rng.shuffle(shuffled);
        int tc = std::min<int>(test_counts[gi], static_cast<int>(shuffled.size()));
        for (std::size_t k = 0; k < shuffled.size(); ++k) {
            if (k < static_cast<std::size_t>(tc))
                test.push_back(shuffled[k]);
            else
                train.push_back(shuffled[k]);
        }
        ++gi;
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
}

PartitionManifest finish_manifest(const LabeledDataset& ds, const std::vector<std::vector<int>>& assignment,
                                  std::uint64_t seed) {
    PartitionManifest m;
    m.seed = seed;
    m.dataset_fingerprint = ds.fingerprint();
    m.train_idx.resize(assignment.size());
    m.test_idx.resize(assignment.size());
    for (std::size_t i = 0; i < assignment.size(); ++i) {
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(i)));
        split_train_test(ds, assignment[i], rng, m.train_idx[i], m.test_idx[i]);
    }
    return m;
}

bool clients_viable(const std::vector<std::vector<int>>& assignment) {
    for (const auto& a : assignment)
        if (a.size() < 2) return false;
    return true;
}

}  // namespace

PartitionManifest partition_pathological(const LabeledDataset& ds, int num_clients, int classes_per_client,
                                         std::uint64_t seed) {
    ds.validate();
    int c = ds.num_classes;
    if (classes_per_client < 1 || classes_per_client > c)
        throw std::invalid_argument("partition_pathological: classes_per_client out of range");
    if (static_cast<long long>(num_clients) * classes_per_client < c)
        throw std::invalid_argument("partition_pathological: infeasible, " + std::to_string(num_clients) + " clients x " +
                                    std::to_string(classes_per_client) + " classes cannot cover " + std::to_string(c));
    auto by_class = indices_by_class(ds);

    const int kMaxAttempts = 1000;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Rng rng(derive_seed(seed, "pathological", static_cast<std::uint64_t>(attempt)));
        std::vector<std::vector<int>> chosen(static_cast<std::size_t>(num_clients));
        std::vector<int> holders_count(static_cast<std::size_t>(c), 0);
        for (int i = 0; i < num_clients; ++i) {
            std::vector<int> all(static_cast<std::size_t>(c));
            std::iota(all.begin(), all.end(), 0);
            rng.shuffle(all);
            chosen[static_cast<std::size_t>(i)].assign(all.begin(), all.begin() + classes_per_client);
            for (int cls : chosen[static_cast<std::size_t>(i)]) holders_count[static_cast<std::size_t>(cls)] += 1;
        }
        if (std::any_of(holders_count.begin(), holders_count.end(), [](int h) { return h == 0; })) continue;

        // per class: normalized U(.4,.6) rates over its holders, largest-remainder counts
        std::vector<std::vector<int>> assignment(static_cast<std::size_t>(num_clients));
        for (int cls = 0; cls < c; ++cls) {
            std::vector<int> holders;
            for (int i = 0; i < num_clients; ++i)
                if (std::find(chosen[static_cast<std::size_t>(i)].begin(), chosen[static_cast<std::size_t>(i)].end(),
                              cls) != chosen[static_cast<std::size_t>(i)].end())
                    holders.push_back(i);
            std::vector<double> rate(holders.size());
            double sum = 0.0;
            for (auto& r : rate) {
                r = rng.uniform(0.4, 0.6);
                sum += r;
            }
            for (auto& r : rate) r /= sum;
            std::vector<int> pool = by_class[static_cast<std::size_t>(cls)];
            rng.shuffle(pool);
            std::vector<int> counts = largest_remainder(rate, static_cast<int>(pool.size()));
            std::size_t cursor = 0;
            for (std::size_t h = 0; h < holders.size(); ++h) {
                for (int k = 0; k < counts[h]; ++k)
                    assignment[static_cast<std::size_t>(holders[h])].push_back(pool[cursor++]);
            }
        }
        if (!clients_viable(assignment)) continue;
        PartitionManifest m = finish_manifest(ds, assignment, seed);
        m.scheme = "pathological";
        m.params = {{"clients", static_cast<double>(num_clients)},
                    {"classes_per_client", static_cast<double>(classes_per_client)}};
        return m;
    }
    throw std::runtime_error("partition_pathological: no feasible assignment after " + std::to_string(kMaxAttempts) +
                             " attempts");
}

PartitionManifest partition_dirichlet(const LabeledDataset& ds, int num_clients, double alpha, std::uint64_t seed) {
    ds.validate();
    if (!(alpha > 0.0)) throw std::invalid_argument("partition_dirichlet: alpha must be > 0");
    if (num_clients < 1) throw std::invalid_argument("partition_dirichlet: need at least one client");
    auto by_class = indices_by_class(ds);

    const int kMaxAttempts = 100;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        Rng rng(derive_seed(seed, "dirichlet", static_cast<std::uint64_t>(attempt)));
        std::vector<std::vector<int>> assignment(static_cast<std::size_t>(num_clients));
        for (int cls = 0; cls < ds.num_classes; ++cls) {
            std::vector<int> pool = by_class[static_cast<std::size_t>(cls)];
            if (pool.empty()) continue;
            rng.shuffle(pool);
            std::vector<double> p = rng.dirichlet(alpha, num_clients);
            std::vector<int> counts = largest_remainder(p, static_cast<int>(pool.size()));
            std::size_t cursor = 0;
            for (int i = 0; i < num_clients; ++i)
                for (int k = 0; k < counts[static_cast<std::size_t>(i)]; ++k)
                    assignment[static_cast<std::size_t>(i)].push_back(pool[cursor++]);
        }
        // a client that drew (almost) nothing cannot train or be evaluated
        if (!clients_viable(assignment)) continue;
        PartitionManifest m = finish_manifest(ds, assignment, seed);
        m.scheme = "dirichlet";
        m.params = {{"clients", static_cast<double>(num_clients)}, {"alpha", alpha}};
        return m;
    }
    throw std::runtime_error("partition_dirichlet: a client received too few samples in every draw after " +
                             std::to_string(kMaxAttempts) + " attempts");
}

PartitionManifest partition_pachinko(const LabeledDataset& ds, int num_clients, double alpha, double beta,
                                     std::uint64_t seed) {
    ds.validate();
    if (ds.coarse.empty()) throw std::invalid_argument("partition_pachinko: dataset has no coarse labels");
    if (!(alpha > 0.0) || !(beta > 0.0)) throw std::invalid_argument("partition_pachinko: alpha and beta must be > 0");
    if (num_clients < 1) throw std::invalid_argument("partition_pachinko: need at least one client");

    // fine -> coarse map, validated for consistency
    std::vector<int> fine_to_coarse(static_cast<std::size_t>(ds.num_classes), -1);
    for (int i = 0; i < ds.size(); ++i) {
        int f = ds.labels[static_cast<std::size_t>(i)];
        int g = ds.coarse[static_cast<std::size_t>(i)];
        if (fine_to_coarse[static_cast<std::size_t>(f)] < 0)
            fine_to_coarse[static_cast<std::size_t>(f)] = g;
        else if (fine_to_coarse[static_cast<std::size_t>(f)] != g)
            throw std::invalid_argument("partition_pachinko: fine label maps to multiple coarse labels");
    }
    std::vector<std::vector<int>> coarse_fines(static_cast<std::size_t>(ds.num_coarse));
    for (int f = 0; f < ds.num_classes; ++f)
        if (fine_to_coarse[static_cast<std::size_t>(f)] >= 0)
            coarse_fines[static_cast<std::size_t>(fine_to_coarse[static_cast<std::size_t>(f)])].push_back(f);

    int quota = ds.size() / num_clients;
    if (quota < 2)
        throw std::invalid_argument("partition_pachinko: per-client quota " + std::to_string(quota) + " is too small");

    Rng rng(derive_seed(seed, "pachinko"));
    auto by_class = indices_by_class(ds);
    std::vector<std::size_t> cursor(static_cast<std::size_t>(ds.num_classes), 0);
    std::vector<int> remaining(static_cast<std::size_t>(ds.num_classes));
    for (int f = 0; f < ds.num_classes; ++f) {
        rng.shuffle(by_class[static_cast<std::size_t>(f)]);
        remaining[static_cast<std::size_t>(f)] = static_cast<int>(by_class[static_cast<std::size_t>(f)].size());
    }

    std::vector<std::vector<int>> assignment(static_cast<std::size_t>(num_clients));
    int total_remaining = ds.size();
    for (int i = 0; i < num_clients; ++i) {
        std::vector<double> p_coarse = rng.dirichlet(alpha, ds.num_coarse);
        std::vector<std::vector<double>> p_fine(static_cast<std::size_t>(ds.num_coarse));
        for (int g = 0; g < ds.num_coarse; ++g) {
            int k = static_cast<int>(coarse_fines[static_cast<std::size_t>(g)].size());
            if (k > 0) p_fine[static_cast<std::size_t>(g)] = rng.dirichlet(beta, k);
        }
        // client's fine-label law: p(f) = p(coarse(f)) * p(f | coarse)
        std::vector<double> pf(static_cast<std::size_t>(ds.num_classes), 0.0);
        for (int g = 0; g < ds.num_coarse; ++g)
            for (std::size_t k = 0; k < coarse_fines[static_cast<std::size_t>(g)].size(); ++k)
                pf[static_cast<std::size_t>(coarse_fines[static_cast<std::size_t>(g)][k])] =
                    p_coarse[static_cast<std::size_t>(g)] * p_fine[static_cast<std::size_t>(g)][k];

        for (int draw = 0; draw < quota; ++draw) {
            if (total_remaining == 0)
                throw std::runtime_error("partition_pachinko: sample supply exhausted with client " +
                                         std::to_string(i) + " short by " + std::to_string(quota - draw));
            // renormalize over classes that still have supply
            double mass = 0.0;
            for (int f = 0; f < ds.num_classes; ++f)
                if (remaining[static_cast<std::size_t>(f)] > 0) mass += pf[static_cast<std::size_t>(f)];
            int pick = -1;
            if (mass <= 0.0) {
                for (int f = 0; f < ds.num_classes; ++f)
                    if (remaining[static_cast<std::size_t>(f)] > 0) {
                        pick = f;
                        break;
                    }
            } else {
                double u = rng.uniform() * mass;
                double acc = 0.0;
                for (int f = 0; f < ds.num_classes; ++f) {
                    if (remaining[static_cast<std::size_t>(f)] == 0) continue;
                    acc += pf[static_cast<std::size_t>(f)];
                    if (u < acc) {
                        pick = f;
                        break;
                    }
                }
                if (pick < 0) {
                    for (int f = ds.num_classes - 1; f >= 0; --f)
                        if (remaining[static_cast<std::size_t>(f)] > 0) {
                            pick = f;
                            break;
                        }
                }
            }
            assignment[static_cast<std::size_t>(i)].push_back(
                by_class[static_cast<std::size_t>(pick)][cursor[static_cast<std::size_t>(pick)]++]);
            remaining[static_cast<std::size_t>(pick)] -= 1;
            total_remaining -= 1;
        }
    }

    PartitionManifest m = finish_manifest(ds, assignment, seed);
    m.scheme = "pachinko";
    m.params = {{"clients", static_cast<double>(num_clients)}, {"alpha", alpha}, {"beta", beta}};
    return m;
}

// ---------------------------------------------------------------------------
// manifest I/O and validation
// ---------------------------------------------------------------------------

std::string PartitionManifest::to_json() const {
    nlohmann::json j;
    j["scheme"] = scheme;
    j["params"] = params;
    j["seed"] = seed;
    j["dataset_fingerprint"] = dataset_fingerprint;
    auto& clients = j["clients"] = nlohmann::json::array();
    for (std::size_t i = 0; i < train_idx.size(); ++i) {
        clients.push_back({{"id", i}, {"train", train_idx[i]}, {"test", test_idx[i]}});
    }
    return j.dump(2);
}

PartitionManifest PartitionManifest::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    PartitionManifest m;
    m.scheme = j.at("scheme").get<std::string>();
    m.params = j.at("params").get<std::map<std::string, double>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::uint64_t>();
    for (const auto& c : j.at("clients")) {
        m.train_idx.push_back(c.at("train").get<std::vector<int>>());
        m.test_idx.push_back(c.at("test").get<std::vector<int>>());
    }
    return m;
}

void PartitionManifest::save(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    os << to_json() << "\n";
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

PartitionManifest PartitionManifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open manifest '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return from_json(text);
}

void PartitionManifest::validate(const LabeledDataset& ds) const {
    if (dataset_fingerprint != ds.fingerprint())
        throw std::runtime_error("manifest fingerprint does not match the dataset");
    std::vector<char> seen(static_cast<std::size_t>(ds.size()), 0);
    auto check = [&](const std::vector<int>& idxs) {
        for (int i : idxs) {
            if (i < 0 || i >= ds.size()) throw std::runtime_error("manifest index out of range");
            if (seen[static_cast<std::size_t>(i)]) throw std::runtime_error("manifest assigns a sample twice");
            seen[static_cast<std::size_t>(i)] = 1;
        }
    };
    for (std::size_t c = 0; c < train_idx.size(); ++c) {
        check(train_idx[c]);
        check(test_idx[c]);
        if (test_idx[c].empty()) throw std::runtime_error("client " + std::to_string(c) + " has an empty test split");
        // matched train/test class proportions, within one sample per class
        std::map<int, int> nc, tc;
        for (int i : train_idx[c]) nc[ds.labels[static_cast<std::size_t>(i)]] += 1;
        for (int i : test_idx[c]) {
            nc[ds.labels[static_cast<std::size_t>(i)]] += 1;
            tc[ds.labels[static_cast<std::size_t>(i)]] += 1;
        }
        for (const auto& [cls, total] : nc) {
            int t = tc.count(cls) ? tc[cls] : 0;
            if (std::fabs(t - 0.2 * total) > 1.0 + 1e-9)
                throw std::runtime_error("client " + std::to_string(c) + " class " + std::to_string(cls) +
                                         " train/test proportions differ by more than one sample");
        }
    }
}

std::vector<ClientData> apply_noise_ladder(const PartitionManifest& manifest, const LabeledDataset& ds,
                                           double sigma_max) {
    if (sigma_max < 0.0) throw std::invalid_argument("apply_noise_ladder: sigma_max must be >= 0");
    int n = manifest.num_clients();
    if (sigma_max > 0.0 && n < 2) throw std::invalid_argument("apply_noise_ladder: need >= 2 clients for a ladder");
    if (sigma_max > 0.0 && ds.kind != DataKind::image)
        throw std::invalid_argument("apply_noise_ladder: noise applies to image datasets only");

    std::vector<ClientData> out(static_cast<std::size_t>(n));
    int dim = ds.sample_dim();
    for (int i = 0; i < n; ++i) {
        ClientData& c = out[static_cast<std::size_t>(i)];
        c.id = i;
        c.dim = dim;
        double sigma = sigma_max > 0.0 ? sigma_max / static_cast<double>(n - 1) * i : 0.0;
        Rng rng(derive_seed(manifest.seed, "noise", static_cast<std::uint64_t>(i)));
        auto emit = [&](const std::vector<int>& idxs, std::vector<double>& xs, std::vector<int>& ys) {
            xs.reserve(idxs.size() * static_cast<std::size_t>(dim));
            for (int idx : idxs) {
                const double* s = ds.sample(idx);
                for (int k = 0; k < dim; ++k) {
                    double v = s[k];
                    if (sigma > 0.0) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
                    xs.push_back(v);
                }
                ys.push_back(ds.labels[static_cast<std::size_t>(idx)]);
            }
        };
        emit(manifest.train_idx[static_cast<std::size_t>(i)], c.train_x, c.train_y);
        emit(manifest.test_idx[static_cast<std::size_t>(i)], c.test_x, c.test_y);
    }
    return out;
}

std::pair<std::vector<int>, std::vector<int>> stratified_split(const LabeledDataset& ds,
                                                               const std::vector<int>& assigned, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> train, test;
    split_train_test(ds, assigned, rng, train, test);
    return {std::move(train), std::move(test)};
}

void save_dataset(const std::string& path, const LabeledDataset& ds) {
    ds.validate();
    ParamSet arrays;
    Tensor data({ds.size(), ds.sample_dim()});
    data.data = ds.data;
    arrays["data"] = std::move(data);
    Tensor labels({ds.size()});
    for (int i = 0; i < ds.size(); ++i) labels.data[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(i)];
    arrays["labels"] = std::move(labels);
    if (!ds.coarse.empty()) {
        Tensor coarse({ds.size()});
        for (int i = 0; i < ds.size(); ++i)
            coarse.data[static_cast<std::size_t>(i)] = ds.coarse[static_cast<std::size_t>(i)];
        arrays["coarse"] = std::move(coarse);
    }
    nlohmann::json meta;
    meta["kind"] = ds.kind == DataKind::image ? "image" : "sequence";
    meta["channels"] = ds.channels;
    meta["height"] = ds.height;
    meta["width"] = ds.width;
    meta["seq_len"] = ds.seq_len;
    meta["vocab"] = ds.vocab;
    meta["num_classes"] = ds.num_classes;
    meta["num_coarse"] = ds.num_coarse;
    save_named_arrays(path, arrays, meta.dump());
}

LabeledDataset load_dataset(const std::string& path) {
    NamedArrayFile f = load_named_arrays(path);
    nlohmann::json meta = nlohmann::json::parse(f.config_echo_json);
    LabeledDataset ds;
    ds.kind = meta.at("kind").get<std::string>() == "image" ? DataKind::image : DataKind::sequence;
    ds.channels = meta.at("channels").get<int>();
    ds.height = meta.at("height").get<int>();
    ds.width = meta.at("width").get<int>();
    ds.seq_len = meta.at("seq_len").get<int>();
    ds.vocab = meta.at("vocab").get<int>();
    ds.num_classes = meta.at("num_classes").get<int>();
    ds.num_coarse = meta.at("num_coarse").get<int>();
    ds.data = f.arrays.at("data").data;
    for (double v : f.arrays.at("labels").data) ds.labels.push_back(static_cast<int>(std::lround(v)));
    if (f.arrays.count("coarse"))
        for (double v : f.arrays.at("coarse").data) ds.coarse.push_back(static_cast<int>(std::lround(v)));
    ds.validate();
    return ds;
}

ClientData make_client_from_indices(const LabeledDataset& ds, int id, const std::vector<int>& train,
                                    const std::vector<int>& test) {
    ClientData c;
    c.id = id;
    c.dim = ds.sample_dim();
    for (int i : train) {
        const double* s = ds.sample(i);
        c.train_x.insert(c.train_x.end(), s, s + c.dim);
        c.train_y.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    for (int i : test) {
        const double* s = ds.sample(i);
        c.test_x.insert(c.test_x.end(), s, s + c.dim);
        c.test_y.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    return c;
}

}  // namespace fedtp
