#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/ecg.hpp"
#include "unipact/nn.hpp"
#include "unipact/tokenizer.hpp"

namespace unipact {

// ---------------------------------------------------------------------------
// projector
// ---------------------------------------------------------------------------

// Two-layer MLP lifting encoder tokens into the decoder width; hidden width
// equals the output width.
struct ProjectorParams {
    Linear fc1, fc2;

    static ProjectorParams make(int64_t d_ecg, int64_t d_llm, uint64_t seed) {
        ProjectorParams p;
        p.fc1 = Linear(d_ecg, d_llm, derive_seed(seed, "projector.fc1"));
        p.fc2 = Linear(d_llm, d_llm, derive_seed(seed, "projector.fc2"));
        return p;
    }

    Tensor forward(const Tensor& h, const Mode& m) const {
        return fc2.forward(gelu(fc1.forward(h, m)), m);
    }

    void collect(ParamMap& out) const {
        fc1.collect("projector.fc1", out);
        fc2.collect("projector.fc2", out);
    }
};

inline Tensor project(const Tensor& h, const ProjectorParams& p, const Mode& m = {}) {
    if (h.shape().back() != p.fc1.in_features())
        throw std::invalid_argument("project: input width " + std::to_string(h.shape().back()) +
                                    " != projector input " + std::to_string(p.fc1.in_features()));
    return p.forward(h, m);
}

// ---------------------------------------------------------------------------
// fused input
// ---------------------------------------------------------------------------

enum class Segment : uint8_t { Ecg, Prompt, Question, Answer };

struct FusedInput {
    Tensor embeddings;             // [T, d_llm], before positional offsets
    std::vector<Segment> tags;     // size T
    std::vector<int> token_ids;    // -1 at ECG rows
    int64_t answer_start = 0;      // index where the answer segment begins
};

// ---------------------------------------------------------------------------
// decoder
// ---------------------------------------------------------------------------

struct DecoderConfig {
    int d_llm = 128;
    int n_layers = 2;
    int n_heads = 4;
    int ffn_mult = 2;
    int max_positions = 256;
};

namespace detail {

inline std::optional<float> parse_numeric_token(const std::string& tok) {
    float v = 0.0f;
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) return std::nullopt;
    return v;
}

}  // namespace detail

// Causal transformer with a token embedding table whose output head is tied
// to the same table, plus learned positional embeddings. Embeddings of tokens
// that parse as numbers carry deterministic sinusoidal value channels in the
// leading dimensions, so the (frozen) table exposes numeric order and
// proximity instead of arbitrary directions per literal.
class Decoder {
public:
    static constexpr int kNumericFreqs = 8;
    static constexpr float kNumericAmp = 0.1f;

    Decoder() = default;

    Decoder(const DecoderConfig& cfg, const Vocab& vocab, uint64_t seed) : cfg_(cfg) {
        if (cfg.d_llm % cfg.n_heads != 0)
            throw std::invalid_argument("decoder: d_llm not divisible by n_heads");
        if (cfg.d_llm < 2 * kNumericFreqs)
            throw std::invalid_argument("decoder: d_llm too small for numeric channels");
        int64_t V = static_cast<int64_t>(vocab.size());
        Rng emb_rng(derive_seed(seed, "decoder.emb"));
        emb_ = Tensor::randn({V, cfg.d_llm}, emb_rng, 0.02f);
        for (int64_t id = 0; id < V; ++id) {
            auto v = detail::parse_numeric_token(vocab.token(static_cast<int>(id)));
            if (!v) continue;
            float* row = emb_.data().data() + id * cfg.d_llm;
            float scale = 0.5f;
            for (int k = 0; k < kNumericFreqs; ++k) {
                row[2 * k] = kNumericAmp * std::sin(*v / scale);
                row[2 * k + 1] = kNumericAmp * std::cos(*v / scale);
                scale *= 2.2f;
            }
        }
        Rng pos_rng(derive_seed(seed, "decoder.pos"));
        pos_ = Tensor::randn({cfg.max_positions, cfg.d_llm}, pos_rng, 0.02f);
        for (int i = 0; i < cfg.n_layers; ++i)
            blocks_.emplace_back(cfg.d_llm, cfg.n_heads, cfg.ffn_mult, /*causal=*/true,
                                 derive_seed(seed, "decoder.block" + std::to_string(i)));
        final_ln_ = LayerNorm(cfg.d_llm);
    }

    Tensor embed_ids(const std::vector<int>& ids) const { return embedding_gather(emb_, ids); }

    // [T, d] -> [T, d] hidden states after the causal stack and final norm.
    Tensor hidden(const Tensor& x_in, const Mode& m) const {
        int64_t T = x_in.shape()[0];
        if (T > cfg_.max_positions)
            throw std::invalid_argument("decoder: sequence length " + std::to_string(T) +
                                        " exceeds max_positions " +
                                        std::to_string(cfg_.max_positions));
        Tensor x = add(x_in, slice_rows(pos_, 0, T));
        for (const auto& b : blocks_) x = b.forward(x, m);
        return final_ln_.forward(x);
    }

    // Tied head: logits = h E^T (+ optional low-rank head adapter).
    Tensor head(const Tensor& h, const Mode& m) const {
        Tensor logits = matmul_nt(h, emb_);
        if (head_lora_) logits = add(logits, head_lora_->forward(h, m));
        return logits;
    }

    void add_lora(const LoraConfig& cfg, uint64_t seed, bool include_head = true) {
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].add_lora(cfg, derive_seed(seed, "decoder.block" + std::to_string(i)));
        if (include_head)
            head_lora_ = LoraAdapter::make(cfg_.d_llm, emb_.shape()[0], cfg,
                                           derive_seed(seed, "decoder.head"));
    }

    void collect(ParamMap& out) const {
        out.emplace_back("decoder.emb", emb_);
        out.emplace_back("decoder.pos", pos_);
        for (size_t i = 0; i < blocks_.size(); ++i)
            blocks_[i].collect("decoder.block" + std::to_string(i), out);
        final_ln_.collect("decoder.final_ln", out);
        if (head_lora_) {
            out.emplace_back("decoder.head.lora_a", head_lora_->a);
            out.emplace_back("decoder.head.lora_b", head_lora_->b);
        }
    }

    const Tensor& embedding() const { return emb_; }
    const DecoderConfig& config() const { return cfg_; }
    bool has_head_lora() const { return head_lora_.has_value(); }
    const LoraAdapter& head_lora() const { return *head_lora_; }

private:
    DecoderConfig cfg_;
    Tensor emb_, pos_;
    std::vector<TransformerBlock> blocks_;
    LayerNorm final_ln_;
    std::optional<LoraAdapter> head_lora_;
};

// ---------------------------------------------------------------------------
// input assembly
// ---------------------------------------------------------------------------

// Unified sequence [ecg rows][prompt][question][answer]; text ids are embedded
// through the decoder table, ECG rows (already projected to d_llm) go first,
// and answer_start records where the answer segment begins — also when no
// answer tokens are given (inference).
inline FusedInput assemble_input(const Tensor* ecg_rows, const std::vector<int>& prompt_ids,
                                 const std::vector<int>& question_ids,
                                 const std::vector<int>& answer_ids, const Decoder& dec) {
    FusedInput f;
    int64_t n_ecg = 0;
    std::vector<int> text_ids;
    text_ids.reserve(prompt_ids.size() + question_ids.size() + answer_ids.size());
    text_ids.insert(text_ids.end(), prompt_ids.begin(), prompt_ids.end());
    text_ids.insert(text_ids.end(), question_ids.begin(), question_ids.end());
    text_ids.insert(text_ids.end(), answer_ids.begin(), answer_ids.end());

    if (ecg_rows) {
        if (ecg_rows->shape().back() != dec.config().d_llm)
            throw std::invalid_argument("assemble_input: ECG rows width " +
                                        std::to_string(ecg_rows->shape().back()) +
                                        " != d_llm " + std::to_string(dec.config().d_llm));
        n_ecg = ecg_rows->shape()[0];
    }
    if (n_ecg + static_cast<int64_t>(text_ids.size()) == 0)
        throw std::invalid_argument("assemble_input: empty sequence");

    if (text_ids.empty()) {
        f.embeddings = *ecg_rows;
    } else {
        Tensor text_emb = dec.embed_ids(text_ids);
        f.embeddings = ecg_rows ? concat_rows(*ecg_rows, text_emb) : text_emb;
    }

    f.tags.assign(static_cast<size_t>(n_ecg), Segment::Ecg);
    f.tags.insert(f.tags.end(), prompt_ids.size(), Segment::Prompt);
    f.tags.insert(f.tags.end(), question_ids.size(), Segment::Question);
    f.tags.insert(f.tags.end(), answer_ids.size(), Segment::Answer);
    f.token_ids.assign(static_cast<size_t>(n_ecg), -1);
    f.token_ids.insert(f.token_ids.end(), text_ids.begin(), text_ids.end());
    f.answer_start = n_ecg + static_cast<int64_t>(prompt_ids.size() + question_ids.size());
    return f;
}

// ---------------------------------------------------------------------------
// full model
// ---------------------------------------------------------------------------

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    uint64_t seed = 1;
};

class FusionModel {
public:
    FusionModel() = default;

    FusionModel(Vocab vocab, const ModelConfig& cfg)
        : vocab_(std::move(vocab)),
          cfg_(cfg),
          encoder_(cfg.encoder, cfg.seed),
          projector_(ProjectorParams::make(cfg.encoder.d_ecg, cfg.decoder.d_llm,
                                           cfg.seed)),
          decoder_(cfg.decoder, vocab_, cfg.seed) {}

    // [L, C] waveform -> [N, d_llm] rows ready for assembly.
    Tensor encode_and_project(const EcgSignal& sig, const Mode& m = {}) const {
        return project(encoder_.encode(sig, m), projector_, m);
    }

    FusedInput assemble(const Tensor* ecg_rows, const std::vector<int>& prompt_ids,
                        const std::vector<int>& question_ids,
                        const std::vector<int>& answer_ids) const {
        return assemble_input(ecg_rows, prompt_ids, question_ids, answer_ids, decoder_);
    }

    Tensor forward_hidden(const FusedInput& f, const Mode& m = {}) const {
        return decoder_.hidden(f.embeddings, m);
    }

    Tensor forward_logits(const FusedInput& f, const Mode& m = {}) const {
        return decoder_.head(forward_hidden(f, m), m);
    }

    // P(Yes) from two-way renormalized logits at the position that predicts
    // the first answer token.
    float answer_score(const FusedInput& f) const {
        NoGradGuard ng;
        if (f.answer_start < 1)
            throw std::invalid_argument("answer_score: empty context before answer");
        Tensor h = forward_hidden(f, Mode{});
        auto [z_yes, z_no] = answer_logits_at(h, f.answer_start - 1);
        return static_cast<float>(logistic(static_cast<double>(z_yes) - z_no));
    }

    // Greedy decode from a context assembled without answer tokens; stops at
    // EOS or max_tokens. Deterministic: ties break toward the lowest id.
    std::string generate(FusedInput f, int max_tokens) const {
        NoGradGuard ng;
        std::vector<int> emitted;
        for (int step = 0; step < max_tokens; ++step) {
            Tensor h = forward_hidden(f, Mode{});
            int64_t last = h.shape()[0] - 1;
            Tensor row = gather_rows(h, {last});
            Tensor logits = decoder_.head(row, Mode{});
            const float* lp = logits.data().data();
            int64_t v = logits.shape()[1];
            int best = 0;
            for (int64_t j = 1; j < v; ++j)
                if (lp[j] > lp[best]) best = static_cast<int>(j);
            if (best == kEosId) break;
            emitted.push_back(best);
            Tensor e = decoder_.embed_ids({best});
            f.embeddings = concat_rows(f.embeddings, e);
            f.tags.push_back(Segment::Answer);
            f.token_ids.push_back(best);
        }
        return vocab_.decode(emitted);
    }

    void add_lora(const LoraConfig& cfg) {
        encoder_.add_lora(cfg, derive_seed(cfg_.seed, "lora"));
        decoder_.add_lora(cfg, derive_seed(cfg_.seed, "lora"), /*include_head=*/true);
    }

    ParamMap collect() const {
        ParamMap out;
        encoder_.collect(out);
        projector_.collect(out);
        decoder_.collect(out);
        return out;
    }

    const Vocab& vocab() const { return vocab_; }
    const ModelConfig& config() const { return cfg_; }
    const EcgEncoder& encoder() const { return encoder_; }
    EcgEncoder& encoder() { return encoder_; }
    const ProjectorParams& projector() const { return projector_; }
    const Decoder& decoder() const { return decoder_; }

private:
    std::pair<float, float> answer_logits_at(const Tensor& h, int64_t row) const {
        int64_t d = cfg_.decoder.d_llm;
        const float* hr = h.data().data() + row * d;
        const float* emb = decoder_.embedding().data().data();
        auto base = [&](int id) {
            float z = 0.0f;
            const float* e = emb + static_cast<size_t>(id) * d;
            for (int64_t i = 0; i < d; ++i) z += hr[i] * e[i];
            return z;
        };
        float z_yes = base(kYesId), z_no = base(kNoId);
        if (decoder_.has_head_lora()) {
            const LoraAdapter& ad = decoder_.head_lora();
            std::vector<float> u(static_cast<size_t>(ad.r), 0.0f);
            const float* ap = ad.a.data().data();
            for (int rr = 0; rr < ad.r; ++rr)
                for (int64_t i = 0; i < d; ++i) u[rr] += hr[i] * ap[rr * d + i];
            const float* bp = ad.b.data().data();
            float s = ad.scaling();
            for (int rr = 0; rr < ad.r; ++rr) {
                z_yes += s * u[rr] * bp[static_cast<size_t>(kYesId) * ad.r + rr];
                z_no += s * u[rr] * bp[static_cast<size_t>(kNoId) * ad.r + rr];
            }
        }
        return {z_yes, z_no};
    }

    Vocab vocab_;
    ModelConfig cfg_;
    EcgEncoder encoder_;
    ProjectorParams projector_;
    Decoder decoder_;
};

}  // namespace unipact
