// Typed client for the local screening service. Every request uses a
// same-origin relative path: the station never talks to any other origin.

export type CaseMode = "NOVICE" | "EXPERT";
export type CaseStatus = "AWAITING_EXPERT" | "COMPLETE";
export type ViaLabel = "VIA_POSITIVE" | "VIA_NEGATIVE";

export interface AiResult {
  label: ViaLabel;
  probability: number;
  gradcam_blob: string | null;
  roi_provenance: string;
  gradcam_url?: string;
}

export interface ExpertDiagnosis {
  label: ViaLabel;
  entered_at: string;
}

export interface CaseView {
  case_id: string;
  patient_ref: string;
  operator_id: string;
  mode: CaseMode;
  status: CaseStatus;
  created_at: string;
  image_blob: string;
  ai_result?: AiResult;
  expert_diagnosis?: ExpertDiagnosis;
  agreement?: boolean;
}

export interface CaseListFilter {
  patient_ref?: string;
  status?: CaseStatus;
  label?: ViaLabel;
}

export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

async function parseError(response: Response): Promise<ServiceError> {
  let detail = response.statusText;
  try {
    const body = (await response.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    /* non-JSON error body */
  }
  return new ServiceError(response.status, detail);
}

export class ScreeningApi {
  constructor(private readonly fetchFn: typeof fetch = (...args) => fetch(...args)) {}

  private async request<T>(url: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(url, init);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  createCase(
    image: Blob,
    fields: { mode: CaseMode; patient_ref: string; operator_id: string; idempotency_key?: string },
  ): Promise<CaseView> {
    const form = new FormData();
    form.append("image", image, "capture.png");
    form.append("mode", fields.mode);
    form.append("patient_ref", fields.patient_ref);
    form.append("operator_id", fields.operator_id);
    if (fields.idempotency_key) form.append("idempotency_key", fields.idempotency_key);
    return this.request<CaseView>("/api/cases", { method: "POST", body: form });
  }

  getCase(caseId: string): Promise<CaseView> {
    return this.request<CaseView>(`/api/cases/${encodeURIComponent(caseId)}`);
  }

  async listCases(filter: CaseListFilter = {}): Promise<CaseView[]> {
    const params = new URLSearchParams();
    if (filter.patient_ref) params.set("patient_ref", filter.patient_ref);
    if (filter.status) params.set("status", filter.status);
    if (filter.label) params.set("label", filter.label);
    const query = params.toString();
    const body = await this.request<{ cases: CaseView[] }>(
      query ? `/api/cases?${query}` : "/api/cases",
    );
    return body.cases;
  }

  submitDiagnosis(caseId: string, diagnosis: ViaLabel): Promise<CaseView> {
    return this.request<CaseView>(
      `/api/cases/${encodeURIComponent(caseId)}/expert-diagnosis`,
      {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ diagnosis }),
      },
    );
  }

  exportArchive(filter: { patient_ref?: string; status?: CaseStatus } = {}): Promise<{
    archive: string;
  }> {
    return this.request("/api/export", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(filter),
    });
  }

  gradcamUrl(caseId: string): string {
    return `/api/cases/${encodeURIComponent(caseId)}/gradcam`;
  }

  imageUrl(caseId: string): string {
    return `/api/cases/${encodeURIComponent(caseId)}/image`;
  }
}
