#include "unetsharp/png_io.hpp"

#include "unetsharp/data.hpp"

#include <png.h>

namespace unetsharp {

Image8 read_png(const std::filesystem::path& path, int channels)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw DataError("cannot read PNG " + path.string() + ": " + img.message);
    }
    img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    Image8 out;
    out.width = img.width;
    out.height = img.height;
    out.channels = channels;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

void write_png(const std::filesystem::path& path, const Image8& image)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
        throw DataError("cannot write PNG " + path.string() + ": " + img.message);
    }
}

} // namespace unetsharp
