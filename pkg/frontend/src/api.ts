// Typed client for the diagnosis prediction HTTP service. The console
// only ever reads from the server plus POST /predict; nothing else
// mutates server state.

export interface GraphWire {
  nodes: string[];
  edges: [string, string][];
}

export interface Usage {
  input_tokens: number;
  output_tokens: number;
  estimated_cost: number;
}

export interface HistoryEntry {
  code: string;
  name: string;
}

export interface HistoryResponse {
  patient_id: string;
  history: HistoryEntry[];
  visit_count: number;
}

export interface PredictResponse {
  patient_id: string;
  codes: string[];
  names: Record<string, string>;
  explanation: string;
  graph: GraphWire;
  summaries: [string, string][];
  usage: Usage;
  comment: string;
}

export interface MetricsResponse {
  w_f1: number;
  recall_at: Record<string, number>;
  patient_count: number;
  scored_code_count: number;
}

export class ApiError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (body && typeof body.detail === "string") {
      return body.detail;
    }
  } catch {
    // fall through to the generic message
  }
  return `request failed with status ${response.status}`;
}

export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response.json() as Promise<T>;
  }

  async listPatients(): Promise<string[]> {
    const payload = await this.getJson<{ patients: string[] }>("/patients");
    return payload.patients;
  }

  async patientHistory(patientId: string): Promise<HistoryResponse> {
    return this.getJson<HistoryResponse>(
      `/patients/${encodeURIComponent(patientId)}/history`,
    );
  }

  async predict(patientId: string, comment: string): Promise<PredictResponse> {
    const response = await this.fetchImpl(`${this.baseUrl}/predict`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ patient_id: patientId, comment }),
    });
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response.json() as Promise<PredictResponse>;
  }

  async runMetrics(runId: string): Promise<MetricsResponse> {
    return this.getJson<MetricsResponse>(
      `/runs/${encodeURIComponent(runId)}/metrics`,
    );
  }
}
