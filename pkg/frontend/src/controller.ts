// Lot view-model: snapshot + stream reduction + optimistic actions.
//
// The controller never invents server state: optimistic marks live in a
// separate "pending" overlay rendered as such, and every confirmed cell
// comes from a snapshot or a stream event. A sequence gap triggers a full
// resync (fresh snapshot, stream restarted from its as_of_seq).

import { ApiClient, ApiError } from "./api.js";
import { GapError, GridState, applyEvent, fromSnapshot } from "./reducer.js";
import { EventStream, StreamStatus } from "./stream.js";
import { Reservation, SlotView, SpaceSummary, StreamEvent } from "./types.js";

export type PendingKind = "reserving" | "cancelling";

export interface NoticeEvent {
  kind: "slot_taken" | "network" | "info";
  message: string;
}

export interface LotViewModel {
  summary: SpaceSummary | null;
  slots: (SlotView & { pending: PendingKind | null })[];
  status: StreamStatus;
  myReservation: Reservation | null;
}

export interface ControllerOptions {
  onChange?: (vm: LotViewModel) => void;
  onNotice?: (notice: NoticeEvent) => void;
  streamOptions?: { heartbeatTimeoutMs?: number; backoffBaseMs?: number };
}

export class LotController {
  grid: GridState | null = null;
  summary: SpaceSummary | null = null;
  myReservation: Reservation | null = null;
  status: StreamStatus = "reconnecting";
  pending = new Map<number, PendingKind>();
  private stream: EventStream | null = null;

  constructor(
    private api: ApiClient,
    private spaceId: string,
    private options: ControllerOptions = {},
  ) {}

  async start(): Promise<void> {
    await this.resync();
    this.stream = new EventStream(this.api.baseUrl, this.grid!.asOfSeq, {
      token: this.api.token,
      onEvent: (event) => this.onEvent(event),
      onStatus: (status) => {
        this.status = status;
        this.changed();
      },
      ...this.options.streamOptions,
    });
    this.stream.start();
  }

  stop(): void {
    this.stream?.stop();
  }

  async resync(): Promise<void> {
    const detail = await this.api.getSpace(this.spaceId);
    this.summary = detail;
    this.grid = fromSnapshot(detail);
    if (this.myReservation) {
      // the reservation may have expired or converted while we were away
      const mine = detail.slots[this.myReservation.slot_no - 1];
      if (mine.state !== "reserved" || !mine.reserved_by_me) this.myReservation = null;
    }
    this.stream?.restartFrom(detail.as_of_seq);
    this.changed();
  }

  onEvent(event: StreamEvent): void {
    if (!this.grid) return;
    try {
      this.grid = applyEvent(this.grid, event);
    } catch (err) {
      if (err instanceof GapError) {
        void this.resync();
        return;
      }
      throw err;
    }
    if (event.space_id === this.grid.spaceId) {
      this.pending.delete(event.slot_no);
      if (this.myReservation && event.slot_no === this.myReservation.slot_no) {
        // anything that moves my slot off "reserved by me" ends my claim
        if (!(event.slot.state === "reserved" && event.slot.reserved_by_me)) {
          this.myReservation = null;
        }
      }
    }
    this.changed();
  }

  async reserveFlow(slotNo: number): Promise<boolean> {
    if (!this.grid) return false;
    const cell = this.grid.slots[slotNo - 1];
    if (!cell || cell.state !== "vacant" || this.pending.has(slotNo)) return false;
    this.pending.set(slotNo, "reserving");
    this.changed();
    try {
      this.myReservation = await this.api.reserve(this.spaceId, slotNo);
      // leave the pending mark: the confirming stream event clears it
      this.changed();
      return true;
    } catch (err) {
      this.pending.delete(slotNo);
      if (err instanceof ApiError && err.status === 409) {
        this.notice({ kind: "slot_taken", message: `Slot ${slotNo} was just taken` });
      } else if (err instanceof ApiError) {
        this.notice({ kind: "info", message: err.message });
      } else {
        this.notice({ kind: "network", message: "Network trouble, try again" });
      }
      this.changed();
      return false;
    }
  }

  async cancelFlow(): Promise<boolean> {
    if (!this.myReservation) return false;
    const slotNo = this.myReservation.slot_no;
    this.pending.set(slotNo, "cancelling");
    this.changed();
    try {
      await this.api.cancel(this.myReservation.reservation_id);
      this.myReservation = null;
      this.changed();
      return true;
    } catch (err) {
      this.pending.delete(slotNo);
      if (err instanceof ApiError) {
        this.notice({ kind: "info", message: err.message });
      } else {
        this.notice({ kind: "network", message: "Network trouble, try again" });
      }
      this.changed();
      return false;
    }
  }

  viewModel(): LotViewModel {
    return {
      summary: this.summary,
      status: this.status,
      myReservation: this.myReservation,
      slots: (this.grid?.slots ?? []).map((slot) => ({
        ...slot,
        pending: this.pending.get(slot.slot_no) ?? null,
      })),
    };
  }

  private changed(): void {
    this.options.onChange?.(this.viewModel());
  }

  private notice(notice: NoticeEvent): void {
    this.options.onNotice?.(notice);
  }
}
