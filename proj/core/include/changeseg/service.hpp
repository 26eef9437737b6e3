#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>

namespace changeseg {

struct ServiceOptions {
  std::filesystem::path data_dir = ".";
  std::string host = "127.0.0.1";
  int port = 8787;
  // Scenes above this many pixels are rejected with 413.
  std::size_t max_pixels = 64ull * 1000 * 1000;
};

// HTTP annotation service:
//   POST /api/sessions                       create from raster refs or upload
//   PUT  /api/sessions/{id}/seeds            replace seed polygons
//   GET  /api/sessions/{id}/expansion        ?alpha=&pc= -> RLE mask + stats
//   GET  /api/sessions/{id}/preview.png      ?layer=pre|post|expansion|overlay
//   POST /api/sessions/{id}/export           ?alpha=&pc=&name= -> raster files
//   GET  /api/sessions/{id}/export/{file}    payload bytes of the last export
class AnnotationService {
 public:
  explicit AnnotationService(ServiceOptions options);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  // Binds and serves on a background thread. Returns the bound port (useful
  // with port 0). Throws Error when binding fails.
  int start();
  // Blocks the calling thread until stop() is called.
  void listen_blocking();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace changeseg
