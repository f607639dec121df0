// DOM rendering. Kept dumb on purpose: everything it draws comes from the
// view model; the only smarts are the expiry countdown ticker and wiring
// click handlers back to the controller.

import { LotViewModel, NoticeEvent, PendingKind } from "./controller.js";

export interface ViewHandlers {
  onReserve: (slotNo: number) => void;
  onCancel: () => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function slotLabel(state: string, pending: PendingKind | null): string {
  if (pending === "reserving") return "reserving…";
  if (pending === "cancelling") return "cancelling…";
  return state;
}

export function renderLot(
  container: HTMLElement,
  vm: LotViewModel,
  handlers: ViewHandlers,
): void {
  container.replaceChildren();

  if (vm.status !== "live") {
    const banner = el(
      "div",
      `banner banner-${vm.status}`,
      vm.status === "reconnecting"
        ? "Connection lost, reconnecting…"
        : "Live updates stalled, data may be out of date",
    );
    container.appendChild(banner);
  }

  if (!vm.summary) {
    container.appendChild(el("p", "empty", "Loading lot…"));
    return;
  }

  const header = el("header", "lot-header");
  header.appendChild(el("h2", undefined, vm.summary.name));
  const location = `${vm.summary.location.latitude.toFixed(4)}, ${vm.summary.location.longitude.toFixed(4)}`;
  header.appendChild(el("p", "meta", `at ${location} · edge ${vm.summary.edge_status}`));
  const counts = vm.summary.counts;
  header.appendChild(
    el(
      "p",
      "meta",
      `${counts.vacant} vacant · ${counts.reserved} reserved · ${counts.occupied} occupied`,
    ),
  );
  container.appendChild(header);

  const grid = el("div", "slot-grid");
  for (const slot of vm.slots) {
    const cls = ["slot", `slot-${slot.color}`];
    if (slot.pending) cls.push("slot-pending");
    if (slot.reserved_by_me) cls.push("slot-mine");
    const cell = el("div", cls.join(" "));
    cell.appendChild(el("div", "slot-no", String(slot.slot_no)));
    cell.appendChild(el("div", "slot-state", slotLabel(slot.state, slot.pending)));
    if (slot.state === "vacant" && !slot.pending) {
      cell.classList.add("slot-clickable");
      cell.addEventListener("click", () => handlers.onReserve(slot.slot_no));
      cell.title = "Click to reserve";
    }
    grid.appendChild(cell);
  }
  container.appendChild(grid);

  if (vm.myReservation) {
    const mine = el("div", "my-reservation");
    mine.appendChild(
      el("p", undefined, `Your reservation: slot ${vm.myReservation.slot_no}`),
    );
    const countdown = el("p", "countdown");
    countdown.dataset.expiresAt = vm.myReservation.expires_at;
    mine.appendChild(countdown);
    const cancel = el("button", "cancel-button", "Cancel reservation");
    cancel.addEventListener("click", handlers.onCancel);
    mine.appendChild(cancel);
    container.appendChild(mine);
    tickCountdown(countdown);
  }
}

/** Server-clock countdown; the "~" concedes client clock skew. */
export function tickCountdown(node: HTMLElement): void {
  const expiresAt = node.dataset.expiresAt;
  if (!expiresAt) return;
  const remainingMs = new Date(expiresAt).getTime() - Date.now();
  if (remainingMs <= 0) {
    node.textContent = "expiring…";
    return;
  }
  const totalSeconds = Math.floor(remainingMs / 1000);
  const minutes = Math.floor(totalSeconds / 60);
  const seconds = totalSeconds % 60;
  node.textContent = `expires in ~${minutes}:${String(seconds).padStart(2, "0")}`;
}

export function showNotice(container: HTMLElement, notice: NoticeEvent): void {
  const toast = el("div", `toast toast-${notice.kind}`, notice.message);
  container.appendChild(toast);
  setTimeout(() => toast.remove(), 4000);
}
