/** Typed client for the rating study HTTP API. */

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface Progress {
  answered: number;
  total: number;
}

export interface StudyItem {
  tokens: string[];
  target_token: number;
  condition: string;
  question: string;
  markup: string;
  display_index: number;
}

export interface SessionInfo {
  session_id: string;
  worker_id: string;
  progress: Progress;
}

export interface NextPayload {
  done: boolean;
  session_id: string;
  cursor: number;
  progress: Progress;
  item?: StudyItem;
}

export interface RatingBody {
  cursor: number;
  rating: number;
  completion_time_s: number;
  comment?: string;
}

export interface AckPayload {
  ack: boolean;
  cursor: number;
  done: boolean;
}

/** Structured failure carrying the server's {code, message} detail. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function toApiError(res: Response): Promise<ApiError> {
  let data: unknown;
  try {
    data = await res.json();
  } catch {
    return new ApiError(res.status, "http-error", res.statusText || `status ${res.status}`);
  }
  const detail = (data as { detail?: unknown }).detail;
  if (detail && typeof detail === "object" && !Array.isArray(detail)) {
    const d = detail as { code?: unknown; message?: unknown };
    if (typeof d.code === "string") {
      return new ApiError(res.status, d.code, String(d.message ?? ""));
    }
  }
  // FastAPI body validation failures put a list under detail
  if (Array.isArray(detail)) {
    const first = detail[0] as { msg?: unknown } | undefined;
    return new ApiError(res.status, "validation-error", String(first?.msg ?? "invalid request body"));
  }
  return new ApiError(res.status, "http-error", typeof detail === "string" ? detail : JSON.stringify(data));
}

export class StudyClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(base: string, fetchFn?: FetchLike) {
    this.base = base.replace(/\/$/, "");
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) {
      throw await toApiError(res);
    }
    return (await res.json()) as T;
  }

  createSession(studyId: string, workerId: string): Promise<SessionInfo> {
    return this.request<SessionInfo>(
      "POST",
      `/studies/${encodeURIComponent(studyId)}/sessions`,
      { worker_id: workerId },
    );
  }

  next(sessionId: string): Promise<NextPayload> {
    return this.request<NextPayload>("GET", `/sessions/${encodeURIComponent(sessionId)}/next`);
  }

  submit(sessionId: string, body: RatingBody): Promise<AckPayload> {
    return this.request<AckPayload>(
      "POST",
      `/sessions/${encodeURIComponent(sessionId)}/ratings`,
      body,
    );
  }
}
