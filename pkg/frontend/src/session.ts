// Client-side session state: one patient, an ordered list of prediction
// turns, and the strictly-single in-flight request rule. Codes are kept
// exactly as the server returned them; the console never reorders.

import { ApiClient, ApiError } from "./api.js";
import type { GraphWire, HistoryEntry, PredictResponse, Usage } from "./api.js";

export interface Turn {
  comment: string;
  codes: string[];
  names: Record<string, string>;
  explanation: string;
  usage: Usage;
  graph: GraphWire;
  summaries: [string, string][];
}

export interface CodeDiff {
  added: string[];
  removed: string[];
}

export interface SessionView {
  patientId: string | null;
  history: HistoryEntry[];
  turns: Turn[];
  latestGraph: GraphWire | null;
  error: string | null;
  inFlight: boolean;
}

export type SubmitResult =
  | { ok: true; turn: Turn }
  | { ok: false; reason: "in-flight" | "no-patient" | "request-failed" };

/** Codes gained and lost between two consecutive turns, order-preserving. */
export function diffCodes(previous: string[], next: string[]): CodeDiff {
  const before = new Set(previous);
  const after = new Set(next);
  return {
    added: next.filter((code) => !before.has(code)),
    removed: previous.filter((code) => !after.has(code)),
  };
}

export class SessionController {
  private readonly api: ApiClient;
  private patientId: string | null = null;
  private history: HistoryEntry[] = [];
  private turns: Turn[] = [];
  private error: string | null = null;
  private inFlight = false;

  constructor(api: ApiClient) {
    this.api = api;
  }

  get view(): SessionView {
    return {
      patientId: this.patientId,
      history: [...this.history],
      turns: [...this.turns],
      latestGraph: this.turns.length > 0 ? this.turns[this.turns.length - 1].graph : null,
      error: this.error,
      inFlight: this.inFlight,
    };
  }

  /** Switch patients: loads history and drops all previous turns. */
  async loadPatient(patientId: string): Promise<void> {
    const payload = await this.api.patientHistory(patientId);
    this.patientId = payload.patient_id;
    this.history = payload.history;
    this.turns = [];
    this.error = null;
  }

  /**
   * Run one prediction turn. While a request is in flight every further
   * submit is rejected without touching the network. A failed request
   * sets the error banner and appends nothing.
   */
  async submitComment(comment: string): Promise<SubmitResult> {
    if (this.inFlight) {
      return { ok: false, reason: "in-flight" };
    }
    if (this.patientId === null) {
      this.error = "select a patient first";
      return { ok: false, reason: "no-patient" };
    }
    this.inFlight = true;
    this.error = null;
    try {
      const payload: PredictResponse = await this.api.predict(this.patientId, comment);
      const turn: Turn = {
        comment,
        codes: [...payload.codes],
        names: { ...payload.names },
        explanation: payload.explanation,
        usage: payload.usage,
        graph: payload.graph,
        summaries: payload.summaries,
      };
      this.turns.push(turn);
      return { ok: true, turn };
    } catch (err) {
      this.error =
        err instanceof ApiError
          ? `prediction failed (${err.status}): ${err.message}`
          : `prediction failed: ${String(err)}`;
      return { ok: false, reason: "request-failed" };
    } finally {
      this.inFlight = false;
    }
  }

  /** Diff of turn i against turn i-1; the first turn diffs against nothing. */
  diffForTurn(index: number): CodeDiff {
    if (index <= 0 || index >= this.turns.length) {
      return { added: [...(this.turns[index]?.codes ?? [])], removed: [] };
    }
    return diffCodes(this.turns[index - 1].codes, this.turns[index].codes);
  }
}
