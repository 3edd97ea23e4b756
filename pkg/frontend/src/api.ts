// Thin fetch client for the what-if service. No modeling here: requests go
// out exactly as built, responses come back exactly as parsed. Slow
// scenarios (HTTP 202) are polled transparently; structured errors are
// rethrown with their server-assigned code and field.

import {
  HealthzDoc,
  JobAccepted,
  PatientDetail,
  PatientSummary,
  ScenarioRequest,
  ScenarioResponse,
} from "./types.js";

export class ServiceError extends Error {
  code: string;
  field: string | null;
  status: number;

  constructor(status: number, code: string, message: string, field: string | null) {
    super(message);
    this.code = code;
    this.field = field;
    this.status = status;
  }
}

export interface ApiOptions {
  fetchFn?: typeof fetch;
  pollMs?: number;
}

export class Api {
  readonly base: string;
  private fetchFn: typeof fetch;
  private pollMs: number;

  constructor(base: string, opts: ApiOptions = {}) {
    this.base = base.replace(/\/+$/, "");
    this.fetchFn = opts.fetchFn ?? fetch;
    this.pollMs = opts.pollMs ?? 400;
  }

  healthz(): Promise<HealthzDoc> {
    return this.getJson("/healthz");
  }

  async patients(): Promise<PatientSummary[]> {
    const doc = await this.getJson<{ patients: PatientSummary[] }>("/patients");
    return doc.patients;
  }

  patient(id: string): Promise<PatientDetail> {
    return this.getJson(`/patients/${encodeURIComponent(id)}`);
  }

  simulate(req: ScenarioRequest, signal?: AbortSignal): Promise<ScenarioResponse> {
    const body = { ...req };
    delete body.edits; // /simulate rejects unknown keys
    return this.scenario("/simulate", body, signal);
  }

  whatif(req: ScenarioRequest, signal?: AbortSignal): Promise<ScenarioResponse> {
    return this.scenario("/whatif", { edits: [], ...req }, signal);
  }

  private async scenario(path: string, body: unknown, signal?: AbortSignal): Promise<ScenarioResponse> {
    const res = await this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
      signal,
    });
    if (res.status === 202) {
      const ticket = (await res.json()) as JobAccepted;
      return this.poll(ticket.poll, signal);
    }
    return this.parse<ScenarioResponse>(res);
  }

  private async poll(pollPath: string, signal?: AbortSignal): Promise<ScenarioResponse> {
    for (;;) {
      await sleep(this.pollMs, signal);
      const res = await this.fetchFn(this.base + pollPath, { signal });
      const doc = await this.parse<ScenarioResponse | { status: string }>(res);
      if ((doc as { status?: string }).status !== "pending") {
        return doc as ScenarioResponse;
      }
    }
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    return this.parse<T>(res);
  }

  private async parse<T>(res: Response): Promise<T> {
    if (!res.ok) {
      let code = "http_error";
      let message = `HTTP ${res.status}`;
      let field: string | null = null;
      try {
        const body = await res.json();
        code = body.code ?? code;
        message = body.message ?? message;
        field = body.field ?? null;
      } catch {
        // non-JSON error body: keep the HTTP fallback
      }
      throw new ServiceError(res.status, code, message, field);
    }
    return res.json() as Promise<T>;
  }
}

function sleep(ms: number, signal?: AbortSignal): Promise<void> {
  return new Promise((resolve, reject) => {
    if (signal?.aborted) {
      reject(abortError());
      return;
    }
    const t = setTimeout(() => {
      signal?.removeEventListener("abort", onAbort);
      resolve();
    }, ms);
    const onAbort = () => {
      clearTimeout(t);
      reject(abortError());
    };
    signal?.addEventListener("abort", onAbort, { once: true });
  });
}

function abortError(): Error {
  const err = new Error("scenario superseded");
  err.name = "AbortError";
  return err;
}

/** One in-flight scenario per draft: a newer run aborts the older one. */
export class ScenarioRunner {
  private api: Api;
  private controller: AbortController | null = null;

  constructor(api: Api) {
    this.api = api;
  }

  run(req: ScenarioRequest): Promise<ScenarioResponse> {
    this.controller?.abort();
    const controller = new AbortController();
    this.controller = controller;
    return this.api.whatif(req, controller.signal);
  }

  cancel() {
    this.controller?.abort();
    this.controller = null;
  }
}

export function isAbort(err: unknown): boolean {
  return err instanceof Error && err.name === "AbortError";
}
