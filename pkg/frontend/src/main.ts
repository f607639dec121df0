// Single-page app bootstrap: registration, lot selection, live grid.

import { ApiClient, ApiError } from "./api.js";
import { LotController } from "./controller.js";
import { renderLot, showNotice, tickCountdown } from "./view.js";

const DEFAULT_API = "http://127.0.0.1:8483";

function apiBase(): string {
  const fromQuery = new URLSearchParams(location.search).get("api");
  if (fromQuery) {
    localStorage.setItem("smartpark.api", fromQuery);
    return fromQuery;
  }
  return localStorage.getItem("smartpark.api") ?? DEFAULT_API;
}

function storedToken(): string | null {
  return localStorage.getItem("smartpark.token");
}

async function ensureRegistered(root: HTMLElement, api: ApiClient): Promise<string> {
  const existing = storedToken();
  if (existing) return existing;
  return new Promise((resolve) => {
    root.innerHTML = `
      <form class="register">
        <h2>Register to reserve parking</h2>
        <label>Full name <input name="full_name" required></label>
        <label>Nationality <input name="nationality" value=""></label>
        <label>National or passport ID <input name="national_id" required></label>
        <label>Contact <input name="contact" value=""></label>
        <label>RFID card UID (hex) <input name="rfid_uid" required placeholder="9C7A31B4"></label>
        <button type="submit">Register</button>
        <p class="register-error"></p>
      </form>`;
    const form = root.querySelector("form")!;
    form.addEventListener("submit", async (submitEvent) => {
      submitEvent.preventDefault();
      const data = Object.fromEntries(new FormData(form).entries()) as Record<string, string>;
      try {
        const motorist = await api.registerMotorist({
          full_name: data.full_name,
          nationality: data.nationality || "n/a",
          national_id: data.national_id,
          contact: data.contact || "n/a",
          rfid_uid: data.rfid_uid,
        });
        localStorage.setItem("smartpark.token", motorist.token);
        localStorage.setItem("smartpark.motorist", motorist.motorist_id);
        resolve(motorist.token);
      } catch (err) {
        const hint = form.querySelector(".register-error")!;
        hint.textContent = err instanceof ApiError ? err.message : "registration failed";
        if (err instanceof ApiError && err.status === 401) {
          localStorage.removeItem("smartpark.token");
        }
      }
    });
  });
}

async function pickSpace(api: ApiClient): Promise<string> {
  const fromQuery = new URLSearchParams(location.search).get("space");
  if (fromQuery) return fromQuery;
  const spaces = await api.listSpaces();
  if (spaces.length === 0) throw new Error("no parking spaces registered yet");
  return spaces[0].space_id;
}

async function boot(): Promise<void> {
  const root = document.getElementById("app")!;
  const toasts = document.getElementById("toasts")!;
  const api = new ApiClient(apiBase());
  api.token = await ensureRegistered(root, api);

  let spaceId: string;
  try {
    spaceId = await pickSpace(api);
  } catch (err) {
    root.textContent = String(err instanceof Error ? err.message : err);
    return;
  }

  const controller = new LotController(api, spaceId, {
    onChange: (vm) =>
      renderLot(root, vm, {
        onReserve: (slotNo) => void controller.reserveFlow(slotNo),
        onCancel: () => void controller.cancelFlow(),
      }),
    onNotice: (notice) => showNotice(toasts, notice),
  });

  try {
    await controller.start();
  } catch (err) {
    if (err instanceof ApiError && err.status === 401) {
      localStorage.removeItem("smartpark.token");
      location.reload();
      return;
    }
    root.textContent = `cannot load lot: ${err instanceof Error ? err.message : err}`;
    return;
  }

  setInterval(() => {
    document.querySelectorAll<HTMLElement>(".countdown").forEach(tickCountdown);
  }, 1000);
}

void boot();
