#ifndef RED_SIGN_TEMPLATE_HPP
#define RED_SIGN_TEMPLATE_HPP

#include "red/core.hpp"

#include <string>

namespace red {

enum class Silhouette { octagon, circle, triangle, diamond };

inline const char* to_string(Silhouette s) noexcept
{
    switch (s) {
    case Silhouette::octagon: return "octagon";
    case Silhouette::circle: return "circle";
    case Silhouette::triangle: return "triangle";
    case Silhouette::diamond: return "diamond";
    }
    return "?";
}

/// Canonical top-down drawing of one sign class.
///
/// `foreground` holds glyph and border pixels whose colors come from `foreground_color`;
/// `background` is the region that receives the (learnable) pattern. The two masks are
/// disjoint and their union is the silhouette. Pixels outside the silhouette are empty.
struct SignTemplate {
    int class_id = 0;
    int side = 0;
    Silhouette silhouette = Silhouette::circle;
    std::string glyph;
    Mask foreground;
    Mask background;
    Image foreground_color;
    Rgb native_background{1.0, 1.0, 1.0};

    [[nodiscard]] Mask shape() const
    {
        Mask m = foreground;
        m |= background;
        return m;
    }

    void validate() const
    {
        if (side <= 0 || foreground.height != side || foreground.width != side || background.height != side
            || background.width != side || foreground_color.height != side || foreground_color.width != side) {
            throw ValidationError("sign template " + std::to_string(class_id) + ": mask dimensions do not match canvas");
        }
        if (foreground.intersects(background)) {
            throw ValidationError("sign template " + std::to_string(class_id) + ": foreground and background overlap");
        }
    }

    bool operator==(const SignTemplate&) const = default;
};

} // namespace red

#endif // RED_SIGN_TEMPLATE_HPP
