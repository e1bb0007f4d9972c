#include "echosynth/clip.hpp"

#include <sstream>

namespace echosynth {

const char* to_string(View v) { return v == View::a2c ? "a2c" : "a4c"; }

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::real: return "real";
        case Provenance::phantom: return "phantom";
        default: return "synthetic";
    }
}

View view_from_string(const std::string& s) {
    if (s == "a2c") return View::a2c;
    if (s == "a4c") return View::a4c;
    throw ParseError("unknown view '" + s + "'");
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ParseError("unknown split '" + s + "'");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "real") return Provenance::real;
    if (s == "phantom") return Provenance::phantom;
    if (s == "synthetic") return Provenance::synthetic;
    throw ParseError("unknown provenance '" + s + "'");
}

void validate_clip(const EchoClip& clip) {
    const auto& f = clip.frames;
    if (!f.defined() || f.dim() != 4 || f.size(0) != kClipFrames || f.size(1) != kClipChannels ||
        f.size(2) != kClipSize || f.size(3) != kClipSize) {
        std::ostringstream os;
        os << "clip '" << clip.case_id << "' has shape " << (f.defined() ? c10::str(f.sizes()) : "<undefined>")
           << ", expected [" << kClipFrames << ", " << kClipChannels << ", " << kClipSize << ", " << kClipSize << "]";
        throw ShapeMismatch(os.str());
    }
    if (f.scalar_type() != torch::kFloat32) {
        throw ShapeMismatch("clip '" + clip.case_id + "' is not float32");
    }
    const double lo = f.min().item<double>();
    const double hi = f.max().item<double>();
    if (lo < -1.0 || hi > 1.0) {
        std::ostringstream os;
        os << "clip '" << clip.case_id << "' has values in [" << lo << ", " << hi << "], expected [-1, 1]";
        throw ShapeMismatch(os.str());
    }
}

torch::Tensor clip_to_input(const torch::Tensor& frames) {
    if (frames.dim() != 4) {
        throw ShapeMismatch("clip_to_input expects [T, C, H, W], got " + c10::str(frames.sizes()));
    }
    return frames.permute({1, 0, 2, 3}).unsqueeze(0).contiguous();
}

torch::Tensor input_to_clip(const torch::Tensor& x) {
    if (x.dim() != 5 || x.size(0) != 1) {
        throw ShapeMismatch("input_to_clip expects [1, C, T, H, W], got " + c10::str(x.sizes()));
    }
    return x.squeeze(0).permute({1, 0, 2, 3}).contiguous();
}

void validate_case(const CaseRecord& rec) {
    if (!(rec.ef_true > 0.0 && rec.ef_true < 100.0)) {
        throw ParseError("case '" + rec.a4c.case_id + "' has ef_true outside (0, 100)");
    }
    validate_clip(rec.a4c);
    if (rec.a4c.view != View::a4c) throw ShapeMismatch("a4c slot holds a non-a4c clip");
    if (rec.a2c) {
        validate_clip(*rec.a2c);
        if (rec.a2c->view != View::a2c) throw ShapeMismatch("a2c slot holds a non-a2c clip");
        if (rec.a2c->case_id != rec.a4c.case_id) {
            throw ParseError("paired views disagree on case_id: '" + rec.a4c.case_id + "' vs '" +
                             rec.a2c->case_id + "'");
        }
    }
}

}  // namespace echosynth
