// Exponential backoff for idempotent HTTP calls (health probes, batch
// submission).  4xx responses other than 429 are not retried.

export interface RetryOptions {
  attempts?: number;
  baseDelayMs?: number;
}

export class HttpStatusError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

const sleep = (ms: number) => new Promise((resolve) => setTimeout(resolve, ms));

export async function withBackoff<T>(fn: () => Promise<T>, options: RetryOptions = {}): Promise<T> {
  const attempts = options.attempts ?? 3;
  let delay = options.baseDelayMs ?? 250;
  let lastError: unknown;
  for (let i = 0; i < attempts; i++) {
    try {
      return await fn();
    } catch (err) {
      lastError = err;
      if (err instanceof HttpStatusError && err.status < 500 && err.status !== 429) {
        throw err;
      }
      if (i + 1 < attempts) {
        await sleep(delay);
        delay *= 2;
      }
    }
  }
  throw lastError;
}

export async function postJson(url: string, body: unknown, options?: RetryOptions): Promise<unknown> {
  return withBackoff(async () => {
    const resp = await fetch(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw new HttpStatusError(resp.status, `HTTP ${resp.status} from ${url}`);
    }
    return resp.json();
  }, options);
}
