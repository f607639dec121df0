// Thin typed client over the public HTTP API.

import { Motorist, Reservation, SpaceDetail, SpaceSummary } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "http_error";
  let message = response.statusText;
  try {
    const doc = await response.json();
    code = doc.error ?? code;
    message = doc.message ?? message;
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(response.status, code, message);
}

export class ApiClient {
  constructor(
    public baseUrl: string,
    public token?: string,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private headers(json = false): Record<string, string> {
    const headers: Record<string, string> = {};
    if (json) headers["Content-Type"] = "application/json";
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    return headers;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      method,
      headers: this.headers(body !== undefined),
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    if (!response.ok) throw await parseError(response);
    if (response.status === 204) return undefined as T;
    return (await response.json()) as T;
  }

  registerMotorist(profile: {
    full_name: string;
    nationality: string;
    national_id: string;
    contact: string;
    rfid_uid: string;
  }): Promise<Motorist & { token: string }> {
    return this.request("POST", "/motorists", profile);
  }

  listSpaces(): Promise<SpaceSummary[]> {
    return this.request("GET", "/spaces");
  }

  getSpace(spaceId: string): Promise<SpaceDetail> {
    return this.request("GET", `/spaces/${spaceId}`);
  }

  reserve(spaceId: string, slotNo: number): Promise<Reservation> {
    return this.request("POST", `/spaces/${spaceId}/reservations`, { slot_no: slotNo });
  }

  cancel(reservationId: string): Promise<void> {
    return this.request("DELETE", `/reservations/${reservationId}`);
  }
}
