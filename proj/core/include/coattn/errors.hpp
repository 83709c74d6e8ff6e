#pragma once

#include <stdexcept>
#include <string>

namespace coattn {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define COATTN_DEFINE_ERROR(NAME)                                             \
    struct NAME : Error {                                                     \
        explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {}    \
    }

COATTN_DEFINE_ERROR(ShapeMismatch);
COATTN_DEFINE_ERROR(EmptyAxis);
COATTN_DEFINE_ERROR(InvalidPermutation);
COATTN_DEFINE_ERROR(AxisOutOfRange);
COATTN_DEFINE_ERROR(NotScalar);
COATTN_DEFINE_ERROR(DetachedGraph);
COATTN_DEFINE_ERROR(NonFinite);
COATTN_DEFINE_ERROR(EmptyOutput);
COATTN_DEFINE_ERROR(InvalidProbability);
COATTN_DEFINE_ERROR(LabelOutOfRange);
COATTN_DEFINE_ERROR(HeadMismatch);
COATTN_DEFINE_ERROR(ConfigMismatch);
COATTN_DEFINE_ERROR(InvalidSpec);
COATTN_DEFINE_ERROR(WindowOutOfRange);
COATTN_DEFINE_ERROR(CorruptFile);
COATTN_DEFINE_ERROR(EmptyDataset);
COATTN_DEFINE_ERROR(NoGapPathway);
COATTN_DEFINE_ERROR(NoAttentionRecord);
COATTN_DEFINE_ERROR(TooShort);
COATTN_DEFINE_ERROR(ConfigHashMismatch);
COATTN_DEFINE_ERROR(DivergenceDetected);
COATTN_DEFINE_ERROR(IoError);

#undef COATTN_DEFINE_ERROR

} // namespace coattn
