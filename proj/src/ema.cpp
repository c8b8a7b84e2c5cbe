#include "micd/ema.hpp"

#include "micd/error.hpp"

namespace micd {

TeacherState init_teacher(const ParamVector& student, double alpha)
{
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw Error("ema.alpha must lie in [0, 1]");
    return TeacherState{student, alpha};
}

void ema_update(TeacherState& teacher, const ParamVector& student)
{
    if (!teacher.params.same_layout(student))
        throw ShapeError("ema_update: teacher and student layouts differ");
    const double a = teacher.alpha;
    for (std::size_t i = 0; i < student.tensors.size(); ++i) {
        auto& t = teacher.params.tensors[i].values;
        const auto& s = student.tensors[i].values;
        for (std::size_t j = 0; j < t.size(); ++j)
            t[j] = a * t[j] + (1.0 - a) * s[j];
    }
}

} // namespace micd
