from sparselab._runtime import enable_arena_reuse

enable_arena_reuse()
