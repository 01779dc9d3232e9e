import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['tests/**/*.test.ts'],
    // training-loop tests run a real model on the cpu backend
    testTimeout: 300_000,
    hookTimeout: 60_000,
  },
});
